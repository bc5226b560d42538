"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op takes Nodes (or array-likes, which become constants), computes the
forward value eagerly and registers a closure mapping the output gradient to
one gradient per parent. ``backward`` walks the graph in reverse topological
order and accumulates into ``Node.grad``.
"""

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, GradientError

_CHECK_FINITE = False
_KINK_LOG = None  # list collecting relu sign patterns while grad_check probes


def set_check_finite(enabled):
    """Turn on NaN/Inf detection for every op output (slow, debugging aid)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, op=None):
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        if _CHECK_FINITE and not np.all(np.isfinite(self.value)):
            raise GradientError(f"non-finite value produced by op {op!r}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Node):
    """Trainable leaf with a dotted name, e.g. ``text_rnn.fwd.W_r``."""

    __slots__ = ("name",)

    def __init__(self, value, name):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, op="param")
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def constant(value):
    return Node(value)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents, backward_fn, op):
    for p in parents:
        if p.requires_grad:
            return Node(value, parents, backward_fn, True, op)
    return Node(value, op=op)


# ---------------------------------------------------------------------------
# linear algebra and elementwise ops


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.value @ b.value

    def bw(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def _binary_shapes(a, b, opname):
    """Return 'same', 'bias_b' or 'bias_a' for the supported broadcasts."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return "same"
    if len(sb) == 1 and len(sa) >= 2 and sa[-1] == sb[0]:
        return "bias_b"
    if len(sa) == 1 and len(sb) >= 2 and sb[-1] == sa[0]:
        return "bias_a"
    raise DimensionError(f"{opname}: shapes {sa} and {sb} are not broadcastable")


def _unbias(g, kind, which):
    # sum a broadcast bias gradient over every leading axis
    if kind == "bias_" + which:
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


def add(a, b):
    a, b = as_node(a), as_node(b)
    kind = _binary_shapes(a, b, "add")

    def bw(g):
        return (_unbias(g, kind, "a") if a.requires_grad else None,
                _unbias(g, kind, "b") if b.requires_grad else None)

    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    kind = _binary_shapes(a, b, "sub")

    def bw(g):
        return (_unbias(g, kind, "a") if a.requires_grad else None,
                _unbias(-g, kind, "b") if b.requires_grad else None)

    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    kind = _binary_shapes(a, b, "mul")

    def bw(g):
        ga = _unbias(g * b.value, kind, "a") if a.requires_grad else None
        gb = _unbias(g * a.value, kind, "b") if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), bw, "mul")


def scale(a, c):
    """Multiply by a python scalar."""
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a):
    a = as_node(a)
    y = expit(a.value)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a):
    a = as_node(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a):
    a = as_node(a)
    pos = a.value > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(pos)
    return _make(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,), "relu")


def elementwise(op, *inputs):
    """Dispatch by name: add, sub, mul, sigmoid, tanh, relu."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def where(mask, a, b):
    """Select ``a`` where the constant boolean mask is set, else ``b``. Exact, no arithmetic."""
    a, b = as_node(a), as_node(b)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or mask.shape != a.shape:
        raise DimensionError(f"where: shapes {mask.shape}, {a.shape}, {b.shape} differ")

    def bw(g):
        return (np.where(mask, g, 0.0) if a.requires_grad else None,
                np.where(mask, 0.0, g) if b.requires_grad else None)

    return _make(np.where(mask, a.value, b.value), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a):
    a = as_node(a)
    shape = a.shape
    return _make(np.array([a.value.sum()]), (a,), lambda g: (np.full(shape, g[0]),), "sum")


def mean_all(a):
    a = as_node(a)
    shape, n = a.shape, a.value.size
    return _make(np.array([a.value.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),), "mean")


def reshape(a, shape):
    a = as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=0):
    nodes = [as_node(t) for t in tensors]
    ref = nodes[0].shape
    nd = len(ref)
    ax = axis % nd
    for n in nodes[1:]:
        s = n.shape
        if len(s) != nd or any(s[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: shapes {[m.shape for m in nodes]} disagree off axis {axis}")
    out = np.concatenate([n.value for n in nodes], axis=ax)
    bounds = np.cumsum([0] + [n.shape[ax] for n in nodes])

    def bw(g):
        grads = []
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return tuple(grads)

    return _make(out, nodes, bw, "concat")


class SparseGrad:
    """Gradient that is zero except at ``index``; lets the engine add in place."""

    __slots__ = ("index", "values")

    def __init__(self, index, values):
        self.index = index
        self.values = values


def slice_last(a, start, stop):
    """``a[..., start:stop]``."""
    a = as_node(a)
    index = (Ellipsis, slice(start, stop))
    return _make(a.value[index], (a,), lambda g: (SparseGrad(index, g),), "slice")


def take_time(a, t):
    """``a[:, t, :]`` for a [batch x T x D] tensor."""
    a = as_node(a)
    index = (slice(None), t, slice(None))
    return _make(a.value[:, t, :], (a,), lambda g: (SparseGrad(index, g),), "take_time")


def stack_time(nodes):
    """Stack T tensors of shape [batch x D] into [batch x T x D]."""
    nodes = [as_node(n) for n in nodes]
    shape = nodes[0].shape
    for n in nodes:
        if n.shape != shape:
            raise DimensionError(f"stack_time: shapes {shape} and {n.shape} differ")
    out = np.stack([n.value for n in nodes], axis=1)

    def bw(g):
        return tuple(g[:, t, :] if n.requires_grad else None for t, n in enumerate(nodes))

    return _make(out, nodes, bw, "stack_time")


def repeat_time(a, steps):
    """Broadcast a [batch x D] tensor to [batch x T x D]; backward sums over T."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise DimensionError(f"repeat_time expects [batch x D], got {a.shape}")
    out = np.repeat(a.value[:, None, :], steps, axis=1)
    return _make(out, (a,), lambda g: (g.sum(axis=1),), "repeat_time")


def gather_time(a, index):
    """Row-wise time gather: ``out[i] = a[i, index[i], :]``."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[rows, index, :] = g
        return (full,)

    return _make(a.value[rows, index, :], (a,), bw, "gather_time")


def permute_time(a, perm):
    """Per-example reorder of the time axis: ``out[i, t] = a[i, perm[i, t]]``.

    ``perm`` must hold a permutation of range(T) in every row.
    """
    a = as_node(a)
    perm = np.asarray(perm, dtype=np.int64)
    rows = np.arange(a.shape[0])[:, None]
    inv = np.argsort(perm, axis=1)
    return _make(a.value[rows, perm], (a,), lambda g: (g[rows, inv],), "permute_time")


def weighted_time_sum(weights, a):
    """``out[i] = sum_t weights[i, t] * a[i, t, :]``."""
    w, a = as_node(weights), as_node(a)
    if w.value.ndim != 2 or a.value.ndim != 3 or w.shape != a.shape[:2]:
        raise DimensionError(f"weighted_time_sum: weights {w.shape} vs values {a.shape}")
    out = np.einsum("nt,ntd->nd", w.value, a.value)

    def bw(g):
        gw = np.einsum("nd,ntd->nt", g, a.value) if w.requires_grad else None
        ga = w.value[:, :, None] * g[:, None, :] if a.requires_grad else None
        return gw, ga

    return _make(out, (w, a), bw, "weighted_time_sum")


def gather_rows(table, ids, frozen_rows=()):
    """Embedding lookup ``table[ids]``; gradients scatter-add and skip ``frozen_rows``."""
    table = as_node(table)
    ids = np.asarray(ids, dtype=np.int64)
    V, d = table.shape

    def bw(g):
        gt = np.zeros((V, d))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        for r in frozen_rows:
            gt[r] = 0.0
        return (gt,)

    return _make(table.value[ids], (table,), bw, "gather_rows")


def softmax_masked(scores, mask):
    """Row softmax over positions where ``mask`` is 1; masked entries are exactly 0."""
    s = as_node(scores)
    m = np.asarray(mask, dtype=bool)
    if s.value.ndim != 2 or m.shape != s.shape:
        raise DimensionError(f"softmax_masked: scores {s.shape} vs mask {m.shape}")
    if not np.all(m.any(axis=1)):
        raise ContractError("softmax_masked: a mask row has no valid position")
    x = np.where(m, s.value, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(x), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (s,), bw, "softmax_masked")


# ---------------------------------------------------------------------------
# gradient propagation


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate dloss/dnode into ``.grad`` of every reachable node needing it."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    # id -> gradient array; ``owned`` marks arrays safe to update in place
    grads = {id(loss): np.ones_like(loss.value)}
    owned = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        owned.discard(id(node))
        node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            if isinstance(pg, SparseGrad):
                if prev is None:
                    prev = np.zeros(parent.shape)
                    owned.add(key)
                elif key not in owned:
                    prev = prev.copy()
                    owned.add(key)
                prev[pg.index] += pg.values
                grads[key] = prev
            elif prev is None:
                grads[key] = pg
            else:
                grads[key] = prev + pg
                owned.add(key)


# ---------------------------------------------------------------------------
# finite-difference verification


class GradCheckReport:
    """Per-parameter max relative error between analytic and central-difference gradients."""

    def __init__(self, errors, tol, checked):
        self.errors = errors
        self.tol = tol
        self.checked = checked

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self):
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self):
        return self.max_error <= self.tol

    def __repr__(self):
        return (f"GradCheckReport(passed={self.passed}, max_error={self.max_error:.3e}, "
                f"worst={self.worst!r}, params={len(self.errors)})")


def grad_check(f, params, eps=1e-5, tol=1e-4, max_entries=None, seed=0, stencil=2):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` rebuilds the graph and returns the scalar loss node; it must be
    deterministic (freeze any dropout masks inside it). ``params`` is a list
    of Parameters or a name -> Parameter mapping. With ``max_entries`` set,
    that many randomly chosen entries per parameter are perturbed instead of
    all of them.

    ``stencil=2`` is the classic (f(x+e) - f(x-e)) / 2e at a fixed step.
    ``stencil=4`` uses the fourth-order central formula with an adaptive
    step starting at ``eps``: it shrinks whenever a probe flips a relu or the
    local curvature makes the step too coarse (see ``_numeric_entry``). Its
    rounding noise is much lower, which matters for full models where many
    true gradients sit near the 1e-8 floor of the relative error.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = {}
    for p in params:
        g = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite analytic gradient for {_pname(p)}")
        analytic[_pname(p)] = g

    rng = np.random.default_rng(seed)
    errors, checked = {}, {}
    base_pattern = _probe(f)[1]
    for p in params:
        name = _pname(p)
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            gn = _numeric_entry(f, flat, i, eps, stencil, base_pattern)
            if not np.isfinite(gn):
                raise GradientError(f"non-finite numeric gradient for {name}[{i}]")
            denom = max(abs(ga[i]), abs(gn), 1e-8)
            worst = max(worst, abs(ga[i] - gn) / denom)
        errors[name] = worst
        checked[name] = len(idx)
    for p in params:
        p.zero_grad()
    return GradCheckReport(errors, tol, checked)


def _probe(f):
    """Evaluate f() and return (loss, relu sign patterns seen while building it)."""
    global _KINK_LOG
    _KINK_LOG = []
    try:
        value = f().value.item()
        return value, _KINK_LOG
    finally:
        _KINK_LOG = None


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _numeric_entry(f, flat, i, eps, stencil, base_pattern, min_eps=1e-6, agree=1e-3,
                   floor=1e-10):
    """Central difference for flat[i].

    With ``stencil=2`` this is the plain two-point formula at ``eps``. With
    ``stencil=4`` the step adapts: a difference taken across a relu kink is
    meaningless, and a large gap between the two-point estimates at eps and
    2*eps means the step is too coarse for the local curvature. In either
    case the step shrinks tenfold (down to ``min_eps``).
    """
    orig = flat[i]
    try:
        if stencil == 2:
            flat[i] = orig + eps
            up = f().value.item()
            flat[i] = orig - eps
            down = f().value.item()
            return (up - down) / (2 * eps)
        while True:
            values, crossed = {}, False
            for k in (1, -1, 2, -2):
                flat[i] = orig + k * eps
                values[k], pattern = _probe(f)
                crossed = crossed or not _same_pattern(pattern, base_pattern)
            d1 = (values[1] - values[-1]) / (2 * eps)
            d2 = (values[2] - values[-2]) / (4 * eps)
            d4 = (4 * d1 - d2) / 3
            coarse = abs(d1 - d2) > agree * abs(d4) + floor
            if not (crossed or coarse) or eps / 10 < min_eps:
                return d4
            eps /= 10
    finally:
        flat[i] = orig


def _pname(p):
    return getattr(p, "name", None) or f"param{id(p)}"
