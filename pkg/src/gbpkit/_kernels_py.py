"""Numpy implementations of the hot loops; used when the compiled module is absent.

Every group is handled by one formula: soft-threshold each entry at ``a``
(the l1 weight of its group), then shrink the whole block towards zero by
``b`` (the l2 weight).  l1 groups have b = 0, l2 groups a = 0, elastic
groups both.  Arrays may be a single vector or a (batch, m) stack.
"""
import numpy as np

# checks without a 1% residual improvement before declaring stagnation
STALL_CHECKS = 20


def _group_sum(v, idx, ptr):
    return np.add.reduceat(v[..., idx], ptr[:-1], axis=-1)


def _expand(per_group, idx, ptr):
    """Broadcast a per-group array back onto atom positions."""
    sizes = np.diff(ptr)
    out = np.empty(per_group.shape[:-1] + (idx.size,))
    out[..., idx] = np.repeat(per_group, sizes, axis=-1)
    return out


def prox(v, step, idx, ptr, a, b, nonneg):
    v = np.asarray(v, dtype=np.float64)
    ta = step * a
    if nonneg:
        w = np.maximum(v - ta, 0.0)
    else:
        w = np.sign(v) * np.maximum(np.abs(v) - ta, 0.0)
    tb = step * b
    nrm = np.sqrt(_group_sum(w * w, idx, ptr))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(tb > 0, np.where(nrm <= tb, 0.0, 1.0 - tb / nrm), 1.0)
    return w * _expand(scale, idx, ptr)


def regularizer(x, idx, ptr, a, b):
    x = np.asarray(x, dtype=np.float64)
    return np.abs(x) @ a + np.sqrt(_group_sum(x * x, idx, ptr)) @ b


def residual(x, p, idx, ptr, a, b, nonneg):
    """Distance of p (= D^T (X - D x)) to the subdifferential at x, max over groups."""
    x = np.asarray(x, dtype=np.float64)
    nx = np.sqrt(_group_sum(x * x, idx, ptr))
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(nx > 0, b / nx, 0.0)
    q = p - _expand(coef, idx, ptr) * x
    if nonneg:
        off = np.maximum(q - a, 0.0)
    else:
        off = np.maximum(np.abs(q) - a, 0.0)
    viol = np.where(x != 0, q - a * np.sign(x), off)
    d = np.sqrt(_group_sum(viol * viol, idx, ptr)) - np.where(nx > 0, 0.0, b)
    return np.maximum(d, 0.0).max(axis=-1)


def fista_batch(D, X, X0, step, idx, ptr, a, b, nonneg, accel, max_iter, tol, rel_tol, check_every):
    """Proximal gradient over the rows of X with per-row stopping.

    Returns (codes, objective, iterations, converged, residual).
    """
    B, M = X0.shape
    codes = np.empty((B, M))
    objective = np.empty(B)
    iters = np.zeros(B, dtype=np.int64)
    conv = np.zeros(B, dtype=bool)
    resid = np.empty(B)

    rows = np.arange(B)
    Xa = X.copy()
    tola = np.asarray(tol, dtype=np.float64).copy()
    x = X0.copy()
    Dx = x @ D.T
    f = 0.5 * np.sum((Dx - Xa) ** 2, axis=1) + regularizer(x, idx, ptr, a, b)
    z, Dz = x.copy(), Dx.copy()
    t = np.ones(B)
    f_check = f.copy()
    r_best = np.full(B, np.inf)
    stall = np.zeros(B, dtype=np.int64)

    it = 0
    while rows.size:
        if it % check_every == 0 or it == max_iter:
            p = (Xa - Dx) @ D
            res = residual(x, p, idx, ptr, a, b, nonneg)
            done = res <= tola
            conv[rows[done]] = True
            better = res < 0.99 * r_best
            r_best = np.where(better, res, r_best)
            stall = np.where(better, 0, stall + 1)
            if it == max_iter:
                done[:] = True
            else:
                done |= (stall >= STALL_CHECKS) & ((f_check - f) <= rel_tol * np.abs(f))
            if done.any():
                fin = rows[done]
                codes[fin] = x[done]
                objective[fin] = f[done]
                iters[fin] = it
                resid[fin] = res[done]
                keep = ~done
                rows = rows[keep]
                Xa, tola, x, Dx, f, z, Dz, t, r_best, stall = (
                    v[keep] for v in (Xa, tola, x, Dx, f, z, Dz, t, r_best, stall))
                if not rows.size:
                    break
            f_check = f.copy()
        it += 1
        g = (Dz - Xa) @ D
        xn = prox(z - step * g, step, idx, ptr, a, b, nonneg)
        Dxn = xn @ D.T
        fn = 0.5 * np.sum((Dxn - Xa) ** 2, axis=1) + regularizer(xn, idx, ptr, a, b)
        if accel:
            bad = (fn > f) & (t > 1.0)
            tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            beta = ((t - 1.0) / tn)[:, None]
            zn = xn + beta * (xn - x)
            Dzn = Dxn + beta * (Dxn - Dx)
            good = ~bad
            z = np.where(bad[:, None], x, zn)
            Dz = np.where(bad[:, None], Dx, Dzn)
            t = np.where(bad, 1.0, tn)
            x = np.where(good[:, None], xn, x)
            Dx = np.where(good[:, None], Dxn, Dx)
            f = np.where(good, fn, f)
        else:
            x, Dx, f = xn, Dxn, fn
            z, Dz = x, Dx
    return codes, objective, iters, conv, resid
