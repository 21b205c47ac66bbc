# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the routines in _kernels_py (same signatures and semantics)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()

# checks without a 1% residual improvement before declaring stagnation
cdef long STALL_CHECKS = 20


cdef void _prox(const double* v, double* out, double step, const long* idx, const long* ptr,
                Py_ssize_t ng, const double* a, const double* b, bint nonneg) noexcept nogil:
    cdef Py_ssize_t k, j, i
    cdef double w, s, nrm, tb, scale
    for k in range(ng):
        nrm = 0.0
        for j in range(ptr[k], ptr[k + 1]):
            i = idx[j]
            w = v[i]
            if nonneg:
                w = w - step * a[i]
                if w < 0.0:
                    w = 0.0
            else:
                s = fabs(w) - step * a[i]
                if s <= 0.0:
                    w = 0.0
                elif w > 0.0:
                    w = s
                else:
                    w = -s
            out[i] = w
            nrm += w * w
        tb = step * b[k]
        if tb > 0.0:
            nrm = sqrt(nrm)
            if nrm <= tb:
                scale = 0.0
            else:
                scale = 1.0 - tb / nrm
            for j in range(ptr[k], ptr[k + 1]):
                out[idx[j]] *= scale


cdef double _reg(const double* x, const long* idx, const long* ptr, Py_ssize_t ng,
                 const double* a, const double* b) noexcept nogil:
    cdef Py_ssize_t k, j, i
    cdef double total = 0.0, nrm
    for k in range(ng):
        nrm = 0.0
        for j in range(ptr[k], ptr[k + 1]):
            i = idx[j]
            total += a[i] * fabs(x[i])
            nrm += x[i] * x[i]
        total += b[k] * sqrt(nrm)
    return total


cdef double _residual(const double* x, const double* p, const long* idx, const long* ptr,
                      Py_ssize_t ng, const double* a, const double* b, bint nonneg) noexcept nogil:
    cdef Py_ssize_t k, j, i
    cdef double worst = 0.0, nx, d2, q, viol, d
    for k in range(ng):
        nx = 0.0
        for j in range(ptr[k], ptr[k + 1]):
            nx += x[idx[j]] * x[idx[j]]
        nx = sqrt(nx)
        d2 = 0.0
        for j in range(ptr[k], ptr[k + 1]):
            i = idx[j]
            q = p[i]
            if nx > 0.0:
                q -= b[k] * x[i] / nx
            if x[i] > 0.0:
                viol = q - a[i]
            elif x[i] < 0.0:
                viol = q + a[i]
            else:
                viol = (q if nonneg else fabs(q)) - a[i]
                if viol < 0.0:
                    viol = 0.0
            d2 += viol * viol
        d = sqrt(d2)
        if nx == 0.0:
            d -= b[k]
        if d > worst:
            worst = d
    return worst


cdef inline void _matvec(const double* D, const double* x, double* y, int n, int m) noexcept nogil:
    # y = D x for a C-ordered (n, m) D, seen by BLAS as the Fortran (m, n) matrix D^T
    cdef char trans = b'T'
    cdef double one = 1.0, zero = 0.0
    cdef int inc = 1
    dgemv(&trans, &m, &n, &one, <double*>D, &m, <double*>x, &inc, &zero, y, &inc)


cdef inline void _rmatvec(const double* D, const double* r, double* y, int n, int m) noexcept nogil:
    # y = D^T r
    cdef char trans = b'N'
    cdef double one = 1.0, zero = 0.0
    cdef int inc = 1
    dgemv(&trans, &m, &n, &one, <double*>D, &m, <double*>r, &inc, &zero, y, &inc)


cdef double _objective(const double* D, const double* X, const double* x, double* Dx, double* r,
                       int n, int m, const long* idx, const long* ptr, Py_ssize_t ng,
                       const double* a, const double* b) noexcept nogil:
    cdef Py_ssize_t i
    cdef double f = 0.0
    _matvec(D, x, Dx, n, m)
    for i in range(n):
        r[i] = Dx[i] - X[i]
        f += r[i] * r[i]
    return 0.5 * f + _reg(x, idx, ptr, ng, a, b)


def prox(v, double step, const long[::1] idx, const long[::1] ptr, const double[::1] a,
         const double[::1] b, bint nonneg):
    src = np.ascontiguousarray(v, dtype=np.float64)
    out = np.empty_like(src)
    cdef const double[:, ::1] S = src.reshape(-1, src.shape[src.ndim - 1])
    cdef double[:, ::1] O = out.reshape(-1, src.shape[src.ndim - 1])
    cdef Py_ssize_t r, ng = ptr.shape[0] - 1
    for r in range(S.shape[0]):
        _prox(&S[r, 0], &O[r, 0], step, &idx[0], &ptr[0], ng, &a[0], &b[0], nonneg)
    return out


def regularizer(x, const long[::1] idx, const long[::1] ptr, const double[::1] a, const double[::1] b):
    src = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] S = src.reshape(-1, src.shape[src.ndim - 1])
    out = np.empty(S.shape[0])
    cdef double[::1] O = out
    cdef Py_ssize_t r, ng = ptr.shape[0] - 1
    for r in range(S.shape[0]):
        O[r] = _reg(&S[r, 0], &idx[0], &ptr[0], ng, &a[0], &b[0])
    return out.reshape(src.shape[:-1]) if src.ndim > 1 else float(out[0])


def residual(x, p, const long[::1] idx, const long[::1] ptr, const double[::1] a,
             const double[::1] b, bint nonneg):
    xs = np.ascontiguousarray(x, dtype=np.float64)
    ps = np.ascontiguousarray(np.broadcast_to(p, xs.shape), dtype=np.float64)
    cdef const double[:, ::1] S = xs.reshape(-1, xs.shape[xs.ndim - 1])
    cdef const double[:, ::1] P = ps.reshape(-1, xs.shape[xs.ndim - 1])
    out = np.empty(S.shape[0])
    cdef double[::1] O = out
    cdef Py_ssize_t r, ng = ptr.shape[0] - 1
    for r in range(S.shape[0]):
        O[r] = _residual(&S[r, 0], &P[r, 0], &idx[0], &ptr[0], ng, &a[0], &b[0], nonneg)
    return out.reshape(xs.shape[:-1]) if xs.ndim > 1 else float(out[0])


def fista_batch(const double[:, ::1] D, const double[:, ::1] X, const double[:, ::1] X0, double step,
                const long[::1] idx, const long[::1] ptr, const double[::1] a, const double[::1] b,
                bint nonneg, bint accel, long max_iter, tol, double rel_tol, long check_every):
    cdef int n = D.shape[0], m = D.shape[1]
    cdef Py_ssize_t B = X.shape[0], ng = ptr.shape[0] - 1, s, i
    cdef const double[::1] tolv = np.array(np.broadcast_to(tol, (B,)), dtype=np.float64)

    codes_a = np.empty((B, m))
    obj_a = np.empty(B)
    it_a = np.zeros(B, dtype=np.int64)
    conv_a = np.zeros(B, dtype=bool)
    res_a = np.empty(B)
    cdef double[:, ::1] codes = codes_a
    cdef double[::1] obj = obj_a, resv = res_a
    cdef long long[::1] itv = it_a
    cdef cnp.npy_bool[::1] convv = conv_a

    cdef double[::1] x = np.empty(m), z = np.empty(m), xn = np.empty(m), g = np.empty(m)
    cdef double[::1] Dx = np.empty(n), Dz = np.empty(n), Dxn = np.empty(n), r = np.empty(n)
    cdef double f, fn, t, tn, beta, f_check, r_best, res
    cdef long it, stall
    cdef bint converged

    with nogil:
        for s in range(B):
            for i in range(m):
                x[i] = X0[s, i]
            f = _objective(&D[0, 0], &X[s, 0], &x[0], &Dx[0], &r[0], n, m, &idx[0], &ptr[0], ng, &a[0], &b[0])
            for i in range(m):
                z[i] = x[i]
            for i in range(n):
                Dz[i] = Dx[i]
            t = 1.0
            f_check = f
            r_best = 1e308
            stall = 0
            it = 0
            converged = False
            while True:
                if it % check_every == 0 or it == max_iter:
                    for i in range(n):
                        r[i] = X[s, i] - Dx[i]
                    _rmatvec(&D[0, 0], &r[0], &g[0], n, m)
                    res = _residual(&x[0], &g[0], &idx[0], &ptr[0], ng, &a[0], &b[0], nonneg)
                    if res <= tolv[s]:
                        converged = True
                        break
                    if it == max_iter:
                        break
                    if res < 0.99 * r_best:
                        r_best = res
                        stall = 0
                    else:
                        stall += 1
                    if stall >= STALL_CHECKS and (f_check - f) <= rel_tol * fabs(f):
                        break
                    f_check = f
                it += 1
                for i in range(n):
                    r[i] = Dz[i] - X[s, i]
                _rmatvec(&D[0, 0], &r[0], &g[0], n, m)
                for i in range(m):
                    g[i] = z[i] - step * g[i]
                _prox(&g[0], &xn[0], step, &idx[0], &ptr[0], ng, &a[0], &b[0], nonneg)
                fn = _objective(&D[0, 0], &X[s, 0], &xn[0], &Dxn[0], &r[0], n, m, &idx[0], &ptr[0], ng, &a[0], &b[0])
                if accel:
                    if fn > f and t > 1.0:
                        for i in range(m):
                            z[i] = x[i]
                        for i in range(n):
                            Dz[i] = Dx[i]
                        t = 1.0
                        continue
                    tn = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
                    beta = (t - 1.0) / tn
                    for i in range(m):
                        z[i] = xn[i] + beta * (xn[i] - x[i])
                        x[i] = xn[i]
                    for i in range(n):
                        Dz[i] = Dxn[i] + beta * (Dxn[i] - Dx[i])
                        Dx[i] = Dxn[i]
                    t = tn
                else:
                    for i in range(m):
                        x[i] = xn[i]
                        z[i] = xn[i]
                    for i in range(n):
                        Dx[i] = Dxn[i]
                        Dz[i] = Dxn[i]
                f = fn
            for i in range(m):
                codes[s, i] = x[i]
            obj[s] = f
            itv[s] = it
            convv[s] = converged
            resv[s] = res
    return codes_a, obj_a, it_a, conv_a, res_a
