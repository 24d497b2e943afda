"""Hot numeric kernels, each in two interchangeable flavours.

Every kernel exists as a pure-numpy implementation and as a numba
``@njit`` one with identical semantics. The active flavour is chosen
once per process from the ``INFODPCCA_NUMBA`` environment variable:
"1"/"true" forces numba, "0"/"false" forces numpy, unset means numba
when it imports and numpy otherwise. Both flavours stay importable so
they can be benchmarked against each other in the same process
(see ``bench/bench_kernels.py``).

All kernels take and return C-contiguous float64 arrays. Within one
backend results are bit-reproducible; across backends they may differ
in the last ulp (different elementwise evaluation order), so
reproducibility guarantees elsewhere in the package are per-backend.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

# ---------------------------------------------------------------------------
# Reference implementations (plain python / numpy). The numba backend jits
# the *_loop functions below; the numpy backend wraps the vectorised ones.
# ---------------------------------------------------------------------------


def _np_henon_orbit(x0, y0, a, b, n, bound):
    orbit = np.empty((n, 2), dtype=np.float64)
    x, y = float(x0), float(y0)
    for t in range(n):
        if not (math.isfinite(x) and math.isfinite(y)) or abs(x) > bound:
            return orbit, False
        orbit[t, 0] = x
        orbit[t, 1] = y
        x, y = 1.0 - a * x * x + y, b * x
    return orbit, True


def _np_sigmoid(x):
    # tanh form is stable for large |x| without branching
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _np_gru_gates_fwd(ax, ah, hprev):
    H = hprev.shape[1]
    r = _np_sigmoid(ax[:, :H] + ah[:, :H])
    u = _np_sigmoid(ax[:, H:2 * H] + ah[:, H:2 * H])
    c = np.tanh(ax[:, 2 * H:] + r * ah[:, 2 * H:])
    hnew = (1.0 - u) * hprev + u * c
    return hnew, r, u, c


def _np_gru_gates_bwd(dh, ah, hprev, r, u, c):
    H = hprev.shape[1]
    du = dh * (c - hprev)
    dc = dh * u
    dhprev = dh * (1.0 - u)
    dpc = dc * (1.0 - c * c)
    dr = dpc * ah[:, 2 * H:]
    dpu = du * u * (1.0 - u)
    dpr = dr * r * (1.0 - r)
    dax = np.concatenate([dpr, dpu, dpc], axis=1)
    dah = np.concatenate([dpr, dpu, dpc * r], axis=1)
    return dax, dah, dhprev


def _np_softplus_fwd(x):
    return np.logaddexp(0.0, x)


def _np_softplus_bwd(x, dy):
    return dy * _np_sigmoid(x)


def _np_gauss_logpdf_fwd(x, mu, sigma):
    z = (x - mu) / sigma
    return (-0.5 * np.sum(z * z, axis=1)
            - np.sum(np.log(sigma), axis=1)
            - 0.5 * LOG_2PI * x.shape[1])


def _np_gauss_logpdf_bwd(x, mu, sigma, dout):
    z = (x - mu) / sigma
    d = dout[:, None]
    dmu = d * z / sigma
    dx = -dmu
    dsigma = d * (z * z - 1.0) / sigma
    return dx, dmu, dsigma


def _np_gauss_entropy_fwd(sigma):
    D = sigma.shape[1]
    return np.sum(np.log(sigma), axis=1) + 0.5 * D * (1.0 + LOG_2PI)


def _np_gauss_entropy_bwd(sigma, dout):
    return dout[:, None] / sigma


def _np_gauss_ce_fwd(mu_q, sig_q, mu_p, sig_p):
    D = mu_q.shape[1]
    diff = mu_q - mu_p
    return (np.sum(np.log(sig_p), axis=1)
            + 0.5 * LOG_2PI * D
            + np.sum((sig_q * sig_q + diff * diff) / (2.0 * sig_p * sig_p), axis=1))


def _np_gauss_ce_bwd(mu_q, sig_q, mu_p, sig_p, dout):
    d = dout[:, None]
    diff = mu_q - mu_p
    sp2 = sig_p * sig_p
    dmu_q = d * diff / sp2
    dmu_p = -dmu_q
    dsig_q = d * sig_q / sp2
    dsig_p = d * (1.0 / sig_p - (sig_q * sig_q + diff * diff) / (sp2 * sig_p))
    return dmu_q, dsig_q, dmu_p, dsig_p


def _np_gauss_kl_fwd(mu_q, sig_q, mu_p, sig_p):
    diff = mu_q - mu_p
    return np.sum(np.log(sig_p / sig_q)
                  + (sig_q * sig_q + diff * diff) / (2.0 * sig_p * sig_p)
                  - 0.5, axis=1)


def _np_gauss_kl_bwd(mu_q, sig_q, mu_p, sig_p, dout):
    d = dout[:, None]
    diff = mu_q - mu_p
    sp2 = sig_p * sig_p
    dmu_q = d * diff / sp2
    dmu_p = -dmu_q
    dsig_q = d * (sig_q / sp2 - 1.0 / sig_q)
    dsig_p = d * (1.0 / sig_p - (sig_q * sig_q + diff * diff) / (sp2 * sig_p))
    return dmu_q, dsig_q, dmu_p, dsig_p


# ---------------------------------------------------------------------------
# Loop bodies for the numba backend. Kept at module level so numba's on-disk
# cache (cache=True) can key them by qualified name.
# ---------------------------------------------------------------------------


def _nb_henon_orbit(x0, y0, a, b, n, bound):
    orbit = np.empty((n, 2), dtype=np.float64)
    x = x0
    y = y0
    for t in range(n):
        if not (math.isfinite(x) and math.isfinite(y)) or abs(x) > bound:
            return orbit, False
        orbit[t, 0] = x
        orbit[t, 1] = y
        xn = 1.0 - a * x * x + y
        y = b * x
        x = xn
    return orbit, True


def _nb_sigmoid(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _nb_gru_gates_fwd(ax, ah, hprev):
    B, H = hprev.shape
    hnew = np.empty((B, H))
    r = np.empty((B, H))
    u = np.empty((B, H))
    c = np.empty((B, H))
    for i in range(B):
        for j in range(H):
            rv = _nb_sigmoid(ax[i, j] + ah[i, j])
            uv = _nb_sigmoid(ax[i, H + j] + ah[i, H + j])
            cv = math.tanh(ax[i, 2 * H + j] + rv * ah[i, 2 * H + j])
            r[i, j] = rv
            u[i, j] = uv
            c[i, j] = cv
            hnew[i, j] = (1.0 - uv) * hprev[i, j] + uv * cv
    return hnew, r, u, c


def _nb_gru_gates_bwd(dh, ah, hprev, r, u, c):
    B, H = hprev.shape
    dax = np.empty((B, 3 * H))
    dah = np.empty((B, 3 * H))
    dhprev = np.empty((B, H))
    for i in range(B):
        for j in range(H):
            g = dh[i, j]
            uv = u[i, j]
            cv = c[i, j]
            rv = r[i, j]
            du = g * (cv - hprev[i, j])
            dc = g * uv
            dhprev[i, j] = g * (1.0 - uv)
            dpc = dc * (1.0 - cv * cv)
            dr = dpc * ah[i, 2 * H + j]
            dpu = du * uv * (1.0 - uv)
            dpr = dr * rv * (1.0 - rv)
            dax[i, j] = dpr
            dax[i, H + j] = dpu
            dax[i, 2 * H + j] = dpc
            dah[i, j] = dpr
            dah[i, H + j] = dpu
            dah[i, 2 * H + j] = dpc * rv
    return dax, dah, dhprev


def _nb_softplus_scalar(v):
    if v > 0.0:
        return v + math.log1p(math.exp(-v))
    return math.log1p(math.exp(v))


def _nb_softplus_fwd(x):
    B, D = x.shape
    y = np.empty((B, D))
    for i in range(B):
        for j in range(D):
            y[i, j] = _nb_softplus_scalar(x[i, j])
    return y


def _nb_softplus_bwd(x, dy):
    B, D = x.shape
    dx = np.empty((B, D))
    for i in range(B):
        for j in range(D):
            dx[i, j] = dy[i, j] * _nb_sigmoid(x[i, j])
    return dx


def _nb_gauss_logpdf_fwd(x, mu, sigma):
    B, D = x.shape
    out = np.empty(B)
    for i in range(B):
        acc = -0.5 * LOG_2PI * D
        for j in range(D):
            z = (x[i, j] - mu[i, j]) / sigma[i, j]
            acc += -0.5 * z * z - math.log(sigma[i, j])
        out[i] = acc
    return out


def _nb_gauss_logpdf_bwd(x, mu, sigma, dout):
    B, D = x.shape
    dx = np.empty((B, D))
    dmu = np.empty((B, D))
    dsigma = np.empty((B, D))
    for i in range(B):
        d = dout[i]
        for j in range(D):
            s = sigma[i, j]
            z = (x[i, j] - mu[i, j]) / s
            dmu[i, j] = d * z / s
            dx[i, j] = -dmu[i, j]
            dsigma[i, j] = d * (z * z - 1.0) / s
    return dx, dmu, dsigma


def _nb_gauss_entropy_fwd(sigma):
    B, D = sigma.shape
    out = np.empty(B)
    for i in range(B):
        acc = 0.5 * D * (1.0 + LOG_2PI)
        for j in range(D):
            acc += math.log(sigma[i, j])
        out[i] = acc
    return out


def _nb_gauss_entropy_bwd(sigma, dout):
    B, D = sigma.shape
    dsigma = np.empty((B, D))
    for i in range(B):
        for j in range(D):
            dsigma[i, j] = dout[i] / sigma[i, j]
    return dsigma


def _nb_gauss_ce_fwd(mu_q, sig_q, mu_p, sig_p):
    B, D = mu_q.shape
    out = np.empty(B)
    for i in range(B):
        acc = 0.5 * LOG_2PI * D
        for j in range(D):
            diff = mu_q[i, j] - mu_p[i, j]
            sp = sig_p[i, j]
            sq = sig_q[i, j]
            acc += math.log(sp) + (sq * sq + diff * diff) / (2.0 * sp * sp)
        out[i] = acc
    return out


def _nb_gauss_ce_bwd(mu_q, sig_q, mu_p, sig_p, dout):
    B, D = mu_q.shape
    dmu_q = np.empty((B, D))
    dsig_q = np.empty((B, D))
    dmu_p = np.empty((B, D))
    dsig_p = np.empty((B, D))
    for i in range(B):
        d = dout[i]
        for j in range(D):
            diff = mu_q[i, j] - mu_p[i, j]
            sp = sig_p[i, j]
            sq = sig_q[i, j]
            sp2 = sp * sp
            dmu_q[i, j] = d * diff / sp2
            dmu_p[i, j] = -dmu_q[i, j]
            dsig_q[i, j] = d * sq / sp2
            dsig_p[i, j] = d * (1.0 / sp - (sq * sq + diff * diff) / (sp2 * sp))
    return dmu_q, dsig_q, dmu_p, dsig_p


def _nb_gauss_kl_fwd(mu_q, sig_q, mu_p, sig_p):
    B, D = mu_q.shape
    out = np.empty(B)
    for i in range(B):
        acc = 0.0
        for j in range(D):
            diff = mu_q[i, j] - mu_p[i, j]
            sp = sig_p[i, j]
            sq = sig_q[i, j]
            acc += math.log(sp / sq) + (sq * sq + diff * diff) / (2.0 * sp * sp) - 0.5
        out[i] = acc
    return out


def _nb_gauss_kl_bwd(mu_q, sig_q, mu_p, sig_p, dout):
    B, D = mu_q.shape
    dmu_q = np.empty((B, D))
    dsig_q = np.empty((B, D))
    dmu_p = np.empty((B, D))
    dsig_p = np.empty((B, D))
    for i in range(B):
        d = dout[i]
        for j in range(D):
            diff = mu_q[i, j] - mu_p[i, j]
            sp = sig_p[i, j]
            sq = sig_q[i, j]
            sp2 = sp * sp
            dmu_q[i, j] = d * diff / sp2
            dmu_p[i, j] = -dmu_q[i, j]
            dsig_q[i, j] = d * (sq / sp2 - 1.0 / sq)
            dsig_p[i, j] = d * (1.0 / sp - (sq * sq + diff * diff) / (sp2 * sp))
    return dmu_q, dsig_q, dmu_p, dsig_p


_KERNEL_NAMES = (
    "henon_orbit",
    "gru_gates_fwd", "gru_gates_bwd",
    "softplus_fwd", "softplus_bwd",
    "gauss_logpdf_fwd", "gauss_logpdf_bwd",
    "gauss_entropy_fwd", "gauss_entropy_bwd",
    "gauss_ce_fwd", "gauss_ce_bwd",
    "gauss_kl_fwd", "gauss_kl_bwd",
)

_NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    **{k: globals()["_np_" + k] for k in _KERNEL_NAMES},
)

_numba_kernels = None
_numba_error = None


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except Exception:
        return False
    return True


def _build_numba_kernels():
    global _numba_kernels, _numba_error
    if _numba_kernels is not None:
        return _numba_kernels
    try:
        from numba import njit
    except Exception as exc:  # pragma: no cover - env without numba
        _numba_error = exc
        raise
    jitted = {}
    helper = njit(cache=True, inline="always")
    sig = helper(_nb_sigmoid)
    sp = helper(_nb_softplus_scalar)
    ns = {"math": math, "np": np, "LOG_2PI": LOG_2PI,
          "_nb_sigmoid": sig, "_nb_softplus_scalar": sp}
    for k in _KERNEL_NAMES:
        fn = globals()["_nb_" + k]
        # rebind the jitted helpers into the function's globals
        fn = type(fn)(fn.__code__, {**fn.__globals__, **ns}, fn.__name__)
        jitted[k] = njit(cache=True)(fn)
    _numba_kernels = SimpleNamespace(name="numba", **jitted)
    return _numba_kernels


def _env_choice():
    v = os.environ.get("INFODPCCA_NUMBA", "").strip().lower()
    if v in ("0", "false", "off", "no"):
        return "numpy"
    if v in ("1", "true", "on", "yes"):
        return "numba"
    return "auto"


def get_kernels(backend: str | None = None) -> SimpleNamespace:
    """Return the kernel namespace for ``backend`` ("numpy" or "numba").

    ``None`` resolves the backend from INFODPCCA_NUMBA (auto-detect by
    default). Requesting "numba" without numba installed raises.
    """
    if backend is None:
        backend = _env_choice()
    if backend == "auto":
        backend = "numba" if numba_available() else "numpy"
    if backend == "numpy":
        return _NUMPY_KERNELS
    if backend == "numba":
        return _build_numba_kernels()
    raise ValueError(f"unknown kernel backend {backend!r}")


_active = None


def active() -> SimpleNamespace:
    """The process-wide kernel namespace (resolved once, from the env)."""
    global _active
    if _active is None:
        _active = get_kernels()
    return _active


def active_backend() -> str:
    return active().name


def set_active(backend: str | None) -> None:
    """Override the process-wide backend; ``None`` restores env-driven
    selection. Meant for benchmarks and tests."""
    global _active
    _active = None if backend is None else get_kernels(backend)
