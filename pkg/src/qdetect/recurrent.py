"""GRU / LSTM transitions and a masked (bi)directional sequence runner."""

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ContractError, DimensionError
from .layers import uniform_init


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _recurrent_init(rng, H, orthogonal):
    return _orthogonal(rng, H) if orthogonal else uniform_init(rng, (H, H))


class GruCell:
    """Gated recurrent unit; the update gate interpolates toward the candidate."""

    gates = ("r", "u", "c")

    def __init__(self, n_in, hidden=200, rng=None, name="gru", orthogonal=False):
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in, self.hidden = n_in, hidden
        H = hidden
        for g in self.gates:
            setattr(self, f"W_{g}", Parameter(uniform_init(rng, (n_in, H)), f"{name}.W_{g}"))
            setattr(self, f"U_{g}", Parameter(_recurrent_init(rng, H, orthogonal), f"{name}.U_{g}"))
            setattr(self, f"b_{g}", Parameter(np.zeros(H), f"{name}.b_{g}"))

    def parameters(self):
        return [getattr(self, f"{k}_{g}") for g in self.gates for k in ("W", "U", "b")]

    def initial_state(self, n):
        return ad.constant(np.zeros((n, self.hidden)))

    def fused(self):
        """Concatenated weights reused across all timesteps of one forward pass."""
        return (ad.concat([self.W_r, self.W_u, self.W_c], axis=1),
                ad.concat([self.b_r, self.b_u, self.b_c], axis=0),
                ad.concat([self.U_r, self.U_u], axis=1))

    def step(self, x_t, state, fused=None):
        return gru_step(self, x_t, state, fused)

    @staticmethod
    def select(mask, new, old):
        return ad.where(mask, new, old)

    @staticmethod
    def output(state):
        return state


class LstmCell:
    """LSTM without peepholes; state is the pair (h, c)."""

    gates = ("i", "f", "o", "g")

    def __init__(self, n_in, hidden=200, rng=None, name="lstm", orthogonal=False,
                 forget_bias=1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in, self.hidden = n_in, hidden
        H = hidden
        for g in self.gates:
            setattr(self, f"W_{g}", Parameter(uniform_init(rng, (n_in, H)), f"{name}.W_{g}"))
            setattr(self, f"U_{g}", Parameter(_recurrent_init(rng, H, orthogonal), f"{name}.U_{g}"))
            b = np.full(H, forget_bias) if g == "f" else np.zeros(H)
            setattr(self, f"b_{g}", Parameter(b, f"{name}.b_{g}"))

    def parameters(self):
        return [getattr(self, f"{k}_{g}") for g in self.gates for k in ("W", "U", "b")]

    def initial_state(self, n):
        z = ad.constant(np.zeros((n, self.hidden)))
        return (z, z)

    def fused(self):
        return (ad.concat([getattr(self, f"W_{g}") for g in self.gates], axis=1),
                ad.concat([getattr(self, f"b_{g}") for g in self.gates], axis=0),
                ad.concat([getattr(self, f"U_{g}") for g in self.gates], axis=1))

    def step(self, x_t, state, fused=None):
        return lstm_step(self, x_t, state, fused)

    @staticmethod
    def select(mask, new, old):
        return (ad.where(mask, new[0], old[0]), ad.where(mask, new[1], old[1]))

    @staticmethod
    def output(state):
        return state[0]


def _check_step(cell, x_t, s):
    if x_t.value.ndim != 2 or x_t.shape[1] != cell.n_in:
        raise DimensionError(f"cell expects input [n x {cell.n_in}], got {x_t.shape}")
    if s.shape != (x_t.shape[0], cell.hidden):
        raise DimensionError(
            f"cell expects state [{x_t.shape[0]} x {cell.hidden}], got {s.shape}")


def gru_step(cell, x_t, s_prev, fused=None):
    x_t, s_prev = ad.as_node(x_t), ad.as_node(s_prev)
    _check_step(cell, x_t, s_prev)
    H = cell.hidden
    W, b, U_ru = cell.fused() if fused is None else fused
    xp = ad.add(ad.matmul(x_t, W), b)
    gates = ad.sigmoid(ad.add(ad.slice_last(xp, 0, 2 * H), ad.matmul(s_prev, U_ru)))
    r = ad.slice_last(gates, 0, H)
    u = ad.slice_last(gates, H, 2 * H)
    cand = ad.tanh(ad.add(ad.slice_last(xp, 2 * H, 3 * H),
                          ad.matmul(ad.mul(r, s_prev), cell.U_c)))
    # (1 - u) * s_prev + u * cand
    return ad.add(s_prev, ad.mul(u, ad.sub(cand, s_prev)))


def lstm_step(cell, x_t, state, fused=None):
    h_prev, c_prev = (ad.as_node(s) for s in state)
    x_t = ad.as_node(x_t)
    _check_step(cell, x_t, h_prev)
    if c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm cell state {c_prev.shape} vs hidden {h_prev.shape}")
    H = cell.hidden
    W, b, U = cell.fused() if fused is None else fused
    pre = ad.add(ad.add(ad.matmul(x_t, W), b), ad.matmul(h_prev, U))
    sig = ad.sigmoid(ad.slice_last(pre, 0, 3 * H))
    i = ad.slice_last(sig, 0, H)
    f = ad.slice_last(sig, H, 2 * H)
    o = ad.slice_last(sig, 2 * H, 3 * H)
    g = ad.tanh(ad.slice_last(pre, 3 * H, 4 * H))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def check_prefix_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    lengths = mask.sum(axis=1)
    expected = np.arange(mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(mask, expected):
        raise ContractError("mask is not a prefix mask (valid steps must come first)")
    return lengths


def reverse_permutation(lengths, T):
    """Per-row index reversing the first ``lengths[i]`` steps and leaving padding in place."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def rnn_forward(cell, x, mask, direction="fwd"):
    """Run ``cell`` over x [n x T x in]; returns hidden outputs [n x T x H].

    Initial state is zero. At padded steps the state is carried unchanged.
    ``bwd`` walks each example from its last valid step down to step 0.
    """
    x = ad.as_node(x)
    if x.value.ndim != 3:
        raise DimensionError(f"rnn_forward expects [n x T x in], got {x.shape}")
    n, T, _ = x.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, T):
        raise DimensionError(f"mask shape {mask.shape} does not match input {x.shape}")
    lengths = check_prefix_mask(mask)
    if direction == "bwd":
        perm = reverse_permutation(lengths, T)
        x = ad.permute_time(x, perm)
    elif direction != "fwd":
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")

    fused = cell.fused()
    state = cell.initial_state(n)
    outputs = []
    full_mask = np.ones((n, cell.hidden), dtype=bool)
    for t in range(T):
        new = cell.step(ad.take_time(x, t), state, fused)
        if mask[:, t].all():
            state = new
        else:
            m = np.broadcast_to(mask[:, t:t + 1], full_mask.shape)
            state = cell.select(m, new, state)
        outputs.append(cell.output(state))
    out = ad.stack_time(outputs)
    if direction == "bwd":
        out = ad.permute_time(out, perm)
    return out


class BiRnn:
    """Independent forward and backward cells; outputs are [fwd_t ; bwd_t]."""

    def __init__(self, n_in, hidden=200, cell="gru", rng=None, name="rnn", orthogonal=False):
        rng = np.random.default_rng(0) if rng is None else rng
        cls = {"gru": GruCell, "lstm": LstmCell}[cell]
        self.fwd = cls(n_in, hidden, rng=rng, name=f"{name}.fwd", orthogonal=orthogonal)
        self.bwd = cls(n_in, hidden, rng=rng, name=f"{name}.bwd", orthogonal=orthogonal)
        self.hidden = hidden

    def parameters(self):
        return self.fwd.parameters() + self.bwd.parameters()

    def __call__(self, x, mask):
        return birnn_forward(self, x, mask)


def birnn_forward(birnn, x, mask):
    f = rnn_forward(birnn.fwd, x, mask, "fwd")
    b = rnn_forward(birnn.bwd, x, mask, "bwd")
    return ad.concat([f, b], axis=2)
