"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery to express the recurrent encoders, Gaussian heads
and information-theoretic objectives in this package: dense ops run on
BLAS through numpy, while the fused elementwise kernels (GRU gates,
softplus, diagonal-Gaussian quantities) dispatch to
:mod:`infodpcca.kernels` so the numba/numpy backend switch applies to
both the forward and the hand-derived backward passes. Every op here is
covered by central finite-difference checks in the test suite.

Values are float64 ndarrays (scalars are 0-d arrays). Graphs are built
eagerly; ``backward()`` releases interior references as it walks so a
training step's peak memory stays near the live forward values.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeMismatch


def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    return a


class Var:
    """A node in the computation graph: a value plus backward plumbing."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, value, requires_grad=False, _parents=(), _bwd=None):
        self.value = _as_value(value)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> np.ndarray:
        return self.value

    def backward(self, free_graph: bool = True) -> None:
        """Accumulate gradients of this (scalar) node into the graph's leaves."""
        if self.value.ndim != 0:
            raise ShapeMismatch("backward() requires a scalar root, got shape %r"
                                % (self.value.shape,))
        order = _toposort(self)
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
            if free_graph and node is not self:
                node._bwd = None
                node._parents = ()
                if not node.requires_grad:
                    node.grad = None

    # Arithmetic sugar; non-Var operands are lifted to constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Var):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def leaf(x) -> Var:
    return Var(x, requires_grad=True)


def _acc(var: Var, g: np.ndarray) -> None:
    if var.grad is None:
        var.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        var.grad = var.grad + g


def _needs(*vars_: Var) -> bool:
    return any(v.requires_grad for v in vars_)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(value, parents, bwd) -> Var:
    if not _needs(*parents):
        return Var(value)
    out = Var(value, requires_grad=True, _parents=tuple(parents), _bwd=bwd)
    return out


# ---------------------------------------------------------------------------
# dense / structural ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = lift(a), lift(b)
    value = a.value @ b.value

    def bwd(g):
        if a.requires_grad:
            _acc(a, g @ b.value.T)
        if b.requires_grad:
            _acc(b, a.value.T @ g)

    return _make(value, (a, b), bwd)


def affine(x, w, b) -> Var:
    """x @ w + b with b broadcast over rows; fused to keep graphs small."""
    x, w, b = lift(x), lift(w), lift(b)
    value = x.value @ w.value + b.value

    def bwd(g):
        if x.requires_grad:
            _acc(x, g @ w.value.T)
        if w.requires_grad:
            _acc(w, x.value.T @ g)
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.value.shape))

    return _make(value, (x, w, b), bwd)


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    value = a.value + b.value

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.value.shape))

    return _make(value, (a, b), bwd)


def sub(a, b) -> Var:
    a, b = lift(a), lift(b)
    value = a.value - b.value

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.value.shape))

    return _make(value, (a, b), bwd)


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    value = a.value * b.value

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(value, (a, b), bwd)


def scale(a, c: float) -> Var:
    a = lift(a)
    c = float(c)
    value = a.value * c

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * c)

    return _make(value, (a,), bwd)


def _unary(a, fn, dfn) -> Var:
    a = lift(a)
    y = fn(a.value)

    def bwd(g):
        if a.requires_grad:
            _acc(a, dfn(g, a.value, y))

    return _make(y, (a,), bwd)


def tanh(a) -> Var:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sigmoid(a) -> Var:
    return _unary(a, lambda x: 0.5 * (np.tanh(0.5 * x) + 1.0),
                  lambda g, x, y: g * y * (1.0 - y))


def relu(a) -> Var:
    return _unary(a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0.0))


def exp(a) -> Var:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a) -> Var:
    return _unary(a, np.log, lambda g, x, y: g / x)


def square(a) -> Var:
    return _unary(a, np.square, lambda g, x, y: g * 2.0 * x)


def softplus(a) -> Var:
    K = kernels.active()
    a = lift(a)
    x2d = a.value.reshape(1, -1) if a.value.ndim == 1 else a.value
    y = K.softplus_fwd(np.ascontiguousarray(x2d)).reshape(a.value.shape)

    def bwd(g):
        if a.requires_grad:
            g2d = np.ascontiguousarray(g.reshape(x2d.shape))
            _acc(a, K.softplus_bwd(np.ascontiguousarray(x2d), g2d).reshape(a.value.shape))

    return _make(y, (a,), bwd)


def concat_cols(parts) -> Var:
    parts = [lift(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=1)
    widths = [p.value.shape[1] for p in parts]

    def bwd(g):
        lo = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _acc(p, g[:, lo:lo + w])
            lo += w

    return _make(value, parts, bwd)


def slice_cols(a, lo: int, hi: int) -> Var:
    a = lift(a)
    value = np.ascontiguousarray(a.value[:, lo:hi])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[:, lo:hi] = g
            _acc(a, full)

    return _make(value, (a,), bwd)


def sum_all(a) -> Var:
    a = lift(a)
    value = np.asarray(a.value.sum())

    def bwd(g):
        if a.requires_grad:
            _acc(a, np.full(a.value.shape, float(g)))

    return _make(value, (a,), bwd)


def mean_all(a) -> Var:
    a = lift(a)
    n = a.value.size
    value = np.asarray(a.value.mean())

    def bwd(g):
        if a.requires_grad:
            _acc(a, np.full(a.value.shape, float(g) / n))

    return _make(value, (a,), bwd)


def add_n(parts) -> Var:
    parts = [lift(p) for p in parts]
    value = parts[0].value.copy()
    for p in parts[1:]:
        value = value + p.value

    def bwd(g):
        for p in parts:
            if p.requires_grad:
                _acc(p, _unbroadcast(g, p.value.shape))

    return _make(value, parts, bwd)


# ---------------------------------------------------------------------------
# fused kernels (numba/numpy backed)
# ---------------------------------------------------------------------------


def _c(x: np.ndarray) -> np.ndarray:
    return x if x.flags["C_CONTIGUOUS"] else np.ascontiguousarray(x)


def gru_gates(ax, ah, hprev) -> Var:
    """Pointwise GRU block: preactivations + previous state -> new state."""
    K = kernels.active()
    ax, ah, hprev = lift(ax), lift(ah), lift(hprev)
    B, H = hprev.value.shape
    if ax.value.shape != (B, 3 * H) or ah.value.shape != (B, 3 * H):
        raise ShapeMismatch("gru_gates expects (B,3H) preactivations for (B,H) state, "
                            f"got {ax.value.shape}, {ah.value.shape}, {hprev.value.shape}")
    hnew, r, u, c = K.gru_gates_fwd(_c(ax.value), _c(ah.value), _c(hprev.value))

    def bwd(g):
        dax, dah, dh = K.gru_gates_bwd(_c(g), _c(ah.value), _c(hprev.value), r, u, c)
        if ax.requires_grad:
            _acc(ax, dax)
        if ah.requires_grad:
            _acc(ah, dah)
        if hprev.requires_grad:
            _acc(hprev, dh)

    return _make(hnew, (ax, ah, hprev), bwd)


def _check_same_2d(*arrs):
    s = arrs[0].shape
    if len(s) != 2 or any(a.shape != s for a in arrs[1:]):
        raise ShapeMismatch("expected matching (B,D) arrays, got %r"
                            % ([a.shape for a in arrs],))


def gauss_logpdf_vec(x, mu, sigma) -> Var:
    """Row-wise diagonal-Gaussian log density: (B,D) args -> (B,)."""
    K = kernels.active()
    x, mu, sigma = lift(x), lift(mu), lift(sigma)
    _check_same_2d(x.value, mu.value, sigma.value)
    out = K.gauss_logpdf_fwd(_c(x.value), _c(mu.value), _c(sigma.value))

    def bwd(g):
        dx, dmu, dsigma = K.gauss_logpdf_bwd(_c(x.value), _c(mu.value),
                                             _c(sigma.value), _c(g))
        if x.requires_grad:
            _acc(x, dx)
        if mu.requires_grad:
            _acc(mu, dmu)
        if sigma.requires_grad:
            _acc(sigma, dsigma)

    return _make(out, (x, mu, sigma), bwd)


def gauss_entropy_vec(sigma) -> Var:
    K = kernels.active()
    sigma = lift(sigma)
    _check_same_2d(sigma.value)
    out = K.gauss_entropy_fwd(_c(sigma.value))

    def bwd(g):
        if sigma.requires_grad:
            _acc(sigma, K.gauss_entropy_bwd(_c(sigma.value), _c(g)))

    return _make(out, (sigma,), bwd)


def _gauss_pair_op(fwd, bwd_kernel, mu_q, sig_q, mu_p, sig_p) -> Var:
    mu_q, sig_q, mu_p, sig_p = lift(mu_q), lift(sig_q), lift(mu_p), lift(sig_p)
    _check_same_2d(mu_q.value, sig_q.value, mu_p.value, sig_p.value)
    out = fwd(_c(mu_q.value), _c(sig_q.value), _c(mu_p.value), _c(sig_p.value))

    def bwd(g):
        dmq, dsq, dmp, dsp = bwd_kernel(_c(mu_q.value), _c(sig_q.value),
                                        _c(mu_p.value), _c(sig_p.value), _c(g))
        if mu_q.requires_grad:
            _acc(mu_q, dmq)
        if sig_q.requires_grad:
            _acc(sig_q, dsq)
        if mu_p.requires_grad:
            _acc(mu_p, dmp)
        if sig_p.requires_grad:
            _acc(sig_p, dsp)

    return _make(out, (mu_q, sig_q, mu_p, sig_p), bwd)


def gauss_cross_entropy_vec(mu_q, sig_q, mu_p, sig_p) -> Var:
    """Row-wise CE(q, p) = -E_q[log p] for diagonal Gaussians: -> (B,)."""
    K = kernels.active()
    return _gauss_pair_op(K.gauss_ce_fwd, K.gauss_ce_bwd, mu_q, sig_q, mu_p, sig_p)


def gauss_kl_vec(mu_q, sig_q, mu_p, sig_p) -> Var:
    """Row-wise KL(q || p) for diagonal Gaussians: -> (B,)."""
    K = kernels.active()
    return _gauss_pair_op(K.gauss_kl_fwd, K.gauss_kl_bwd, mu_q, sig_q, mu_p, sig_p)
