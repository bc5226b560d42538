"""Feedforward building blocks: dense, embedding, dropout, batch norm."""

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import ContractError, DimensionError, VocabularyError

PAD_ID = 0
UNK_ID = 1
INIT_SCALE = 0.08


def uniform_init(rng, shape, scale=INIT_SCALE):
    return rng.uniform(-scale, scale, size=shape)


class DenseLayer:
    """activation(x @ W + b); accepts [n x in] or [n x T x in] inputs."""

    def __init__(self, n_in, n_out=200, activation="relu", rng=None, name="dense"):
        if activation not in ("relu", "none"):
            raise ValueError(f"unsupported activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.W = Parameter(uniform_init(rng, (n_in, n_out)), f"{name}.W")
        self.b = Parameter(np.zeros(n_out), f"{name}.b")

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, x):
        return dense_forward(self, x)


def dense_forward(layer, x):
    x = ad.as_node(x)
    if x.shape[-1] != layer.n_in:
        raise DimensionError(f"dense layer expects last dim {layer.n_in}, got shape {x.shape}")
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, layer.n_in)) if x.value.ndim != 2 else x
    out = ad.add(ad.matmul(flat, layer.W), layer.b)
    if layer.activation == "relu":
        out = ad.relu(out)
    if x.value.ndim != 2:
        out = ad.reshape(out, lead + (layer.n_out,))
    return out


class EmbeddingTable:
    """[V x d] lookup table; row PAD_ID stays zero and never receives gradient."""

    def __init__(self, vocab_size, dim=200, rng=None, name="embed"):
        rng = np.random.default_rng(0) if rng is None else rng
        E = uniform_init(rng, (vocab_size, dim))
        E[PAD_ID] = 0.0
        self.vocab_size, self.dim = vocab_size, dim
        self.E = Parameter(E, f"{name}.E")

    def parameters(self):
        return [self.E]

    def __call__(self, ids):
        return embed(self, ids)


def embed(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.max() >= table.vocab_size or ids.min() < 0):
        raise VocabularyError(
            f"token id {int(ids.max())} outside vocabulary of size {table.vocab_size}")
    return ad.gather_rows(table.E, ids, frozen_rows=(PAD_ID,))


class Dropout:
    """Inverted dropout. ``rate`` is the drop probability."""

    def __init__(self, rate=0.2, seed=0):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def __call__(self, x, mode="train", rng=None):
        return dropout_apply(self, x, mode, rng)


def dropout_apply(spec, x, mode="train", rng=None):
    x = ad.as_node(x)
    if mode != "train" or spec.rate == 0.0:
        return x
    rng = spec.rng if rng is None else rng
    keep = rng.random(x.shape) >= spec.rate
    mask = keep / (1.0 - spec.rate)
    return ad.mul(x, mask)


class BatchNormLayer:
    def __init__(self, dim, momentum=0.1, eps=1e-5, name="bn"):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.updates = 0
        self.name = name

    def parameters(self):
        return [self.gamma, self.beta]

    def state(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def __call__(self, x, mode="train", mask=None):
        return batchnorm_forward(self, x, mode, mask)


def batchnorm_forward(layer, x, mode="train", mask=None):
    """Normalize the last axis of ``x``.

    For [n x T x d] inputs the statistics pool over batch and time; ``mask``
    ([n x T], 1 = valid) excludes padded positions from the statistics.
    Padded rows are still normalized, with the valid-row statistics.
    """
    x = ad.as_node(x)
    d = layer.dim
    if x.shape[-1] != d:
        raise DimensionError(f"batch norm over {d} features got shape {x.shape}")
    shape = x.shape
    X = x.value.reshape(-1, d)
    gamma, beta = layer.gamma, layer.beta

    if mode != "train":
        inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
        xhat = (X - layer.running_mean) * inv

        def bw_infer(g):
            G = g.reshape(-1, d)
            gx = (G * gamma.value * inv).reshape(shape) if x.requires_grad else None
            return gx, (G * xhat).sum(axis=0), G.sum(axis=0)

        out = (xhat * gamma.value + beta.value).reshape(shape)
        return ad._make(out, (x, gamma, beta), bw_infer, "batchnorm")

    w = np.ones(X.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if w.shape[0] != X.shape[0]:
        raise DimensionError(f"batch norm mask {np.shape(mask)} does not match input {shape}")
    n = w.sum()
    if n < 2:
        raise ContractError(f"batch norm in train mode needs at least 2 rows, got {int(n)}")
    mean = (w @ X) / n
    xc = X - mean
    var = (w @ (xc * xc)) / n
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = xc * inv

    # cumulative average until it is no longer than the momentum window
    layer.updates += 1
    m = max(layer.momentum, 1.0 / layer.updates)
    layer.running_mean = (1 - m) * layer.running_mean + m * mean
    layer.running_var = (1 - m) * layer.running_var + m * var

    def bw(g):
        G = g.reshape(-1, d)
        ggamma = (G * xhat).sum(axis=0)
        gbeta = G.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxhat = G * gamma.value
            gvar = -0.5 * inv ** 3 * (gxhat * xc).sum(axis=0)
            gmean = -inv * gxhat.sum(axis=0)
            gx = gxhat * inv + w[:, None] * (gmean / n + gvar * 2.0 * xc / n)
            gx = gx.reshape(shape)
        return gx, ggamma, gbeta

    out = (xhat * gamma.value + beta.value).reshape(shape)
    return ad._make(out, (x, gamma, beta), bw, "batchnorm")
