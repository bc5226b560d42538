"""Context functions reducing a masked annotation sequence to one vector."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import ConfigurationError, ContractError, DimensionError
from .layers import uniform_init
from .recurrent import check_prefix_mask


@dataclass
class ContextOutput:
    context: Node
    alphas: np.ndarray  # [batch x T]; empty (0 x 0) for last-state context


def _lengths(z, mask):
    mask = np.asarray(mask, dtype=bool)
    if z.value.ndim != 3 or mask.shape != z.shape[:2]:
        raise DimensionError(f"annotations {z.shape} do not match mask {mask.shape}")
    lengths = check_prefix_mask(mask)
    if np.any(lengths == 0):
        raise ContractError("context over a zero-length example")
    return mask, lengths


def context_last(z, mask):
    """Annotation at each example's last valid timestep."""
    z = ad.as_node(z)
    _, lengths = _lengths(z, mask)
    return ContextOutput(ad.gather_time(z, lengths - 1), np.zeros((0, 0)))


class AttentionScorer:
    """Additive scorer e_t = v . tanh(z_t W + cond U + b); U only when conditioned."""

    def __init__(self, n_in, width=200, cond_dim=None, rng=None, name="att"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in, self.width, self.cond_dim = n_in, width, cond_dim
        self.W_a = Parameter(uniform_init(rng, (n_in, width)), f"{name}.W_a")
        self.U_a = (Parameter(uniform_init(rng, (cond_dim, width)), f"{name}.U_a")
                    if cond_dim else None)
        self.v_a = Parameter(uniform_init(rng, (width,)), f"{name}.v_a")
        self.b_a = Parameter(np.zeros(width), f"{name}.b_a")

    @property
    def conditioned(self):
        return self.U_a is not None

    def parameters(self):
        ps = [self.W_a, self.v_a, self.b_a]
        if self.U_a is not None:
            ps.insert(1, self.U_a)
        return ps

    def scores(self, z, condition=None):
        n, T, D = z.shape
        if D != self.n_in:
            raise DimensionError(f"scorer expects annotations of dim {self.n_in}, got {D}")
        proj = ad.reshape(ad.matmul(ad.reshape(z, (n * T, D)), self.W_a), (n, T, self.width))
        if condition is not None:
            cp = ad.matmul(condition, self.U_a)
            proj = ad.add(proj, ad.repeat_time(cp, T))
        hidden = ad.tanh(ad.add(proj, self.b_a))
        e = ad.matmul(ad.reshape(hidden, (n * T, self.width)),
                      ad.reshape(self.v_a, (self.width, 1)))
        return ad.reshape(e, (n, T))


def context_attention(z, mask, scorer, condition=None):
    """Attention-weighted sum of annotations over valid timesteps."""
    z = ad.as_node(z)
    mask, _ = _lengths(z, mask)
    if (condition is not None) != scorer.conditioned:
        raise ConfigurationError(
            "condition must be given exactly when the scorer has a conditioning matrix U_a")
    if condition is not None:
        condition = ad.as_node(condition)
        if condition.shape != (z.shape[0], scorer.cond_dim):
            raise DimensionError(
                f"condition shape {condition.shape} != ({z.shape[0]}, {scorer.cond_dim})")
    alphas = ad.softmax_masked(scorer.scores(z, condition), mask)
    return ContextOutput(ad.weighted_time_sum(alphas, z), alphas.value)
