"""Shared central-finite-difference gradient harness used across the suite."""

import numpy as np


def fd_gradient(f, x, eps=1e-5):
    """Central differences of the scalar ``f()`` w.r.t. ``x``.

    ``x`` is perturbed in place and restored; ``f`` must read the current
    contents of ``x`` on every call.
    """
    g = np.zeros(x.shape, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a, b, floor=1e-10):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_store_grads(loss_fn, store, names=None, eps=1e-5, tol=1e-4):
    """Compare analytic parameter gradients of ``loss_fn`` against finite
    differences.

    ``loss_fn`` maps a ``{name: Var}`` dict (or the store itself) to a
    scalar ``Var`` and must be deterministic. Returns the worst relative
    error seen; asserts it stays below ``tol`` per parameter.
    """
    lvars = store.as_vars()
    loss = loss_fn(lvars)
    loss.backward()
    worst = 0.0
    check = names if names is not None else \
        [n for n in store.names() if not store.is_frozen(n)]
    for name in check:
        analytic = lvars[name].grad
        if analytic is None:
            analytic = np.zeros_like(store[name])
        fd = fd_gradient(lambda: float(loss_fn(store.as_vars()).value),
                         store[name], eps)
        err = rel_err(analytic, fd)
        assert err < tol, f"{name}: gradient rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


def check_input_grad(loss_fn, x, eps=1e-5, tol=1e-4):
    """Same as above but w.r.t. a single input array.

    ``loss_fn(x_var)`` -> scalar Var; the analytic gradient is read off
    the leaf, the FD gradient recomputes the loss at perturbed inputs.
    """
    from infodpcca.autodiff import leaf

    xv = leaf(x)
    loss = loss_fn(xv)
    loss.backward()
    analytic = xv.grad if xv.grad is not None else np.zeros_like(x)
    fd = fd_gradient(lambda: float(loss_fn(leaf(x)).value), x, eps)
    err = rel_err(analytic, fd)
    assert err < tol, f"input gradient rel err {err:.3e} >= {tol}"
    return err
