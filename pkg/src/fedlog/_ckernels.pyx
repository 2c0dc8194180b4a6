# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same contract as ``fedlog._pykernels``.

Dense products go through the BLAS exported by scipy so that large layers
keep BLAS speed, while the per-call Python overhead of the numpy version
(one temporary per operation) disappears for the small layers typical of
client bodies.
"""

import numpy as np

from libc.math cimport exp, log, log1p, expm1, fabs, sqrt, INFINITY
from scipy.linalg.cython_blas cimport dgemm

cdef enum:
    IDENTITY = 0
    RELU = 1
    CLAMP = 2

cdef char TRANS = 84   # 'T'
cdef char NOTRANS = 78  # 'N'


cdef void _affine(double[:, ::1] x, double[:, ::1] w, double[::1] b, double[:, ::1] out) noexcept nogil:
    # out = x @ w.T + b  (row-major buffers seen as column-major transposes)
    cdef int n = x.shape[0], p = x.shape[1], q = w.shape[0]
    cdef int i, j
    cdef double one = 1.0
    for i in range(n):
        for j in range(q):
            out[i, j] = b[j]
    if n == 0 or p == 0 or q == 0:
        return
    dgemm(&TRANS, &NOTRANS, &q, &n, &p, &one, &w[0, 0], &p, &x[0, 0], &p, &one, &out[0, 0], &q)


cdef void _activate(double[:, ::1] z, Py_ssize_t act, double bound) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double v
    if act == RELU:
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                if z[i, j] < 0.0:
                    z[i, j] = 0.0
    elif act == CLAMP:
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                v = z[i, j]
                if v > bound:
                    z[i, j] = bound
                elif v < -bound:
                    z[i, j] = -bound


cdef list _layer_outputs(list weights, list biases, Py_ssize_t[::1] acts, double[::1] bounds, object x):
    cdef list outs = [x]
    cdef double[:, ::1] h = x
    cdef double[:, ::1] z
    cdef Py_ssize_t li
    for li in range(len(weights)):
        w = weights[li]
        z_arr = np.empty((x.shape[0], w.shape[0]))
        z = z_arr
        _affine(h, w, biases[li], z)
        _activate(z, acts[li], bounds[li])
        outs.append(z_arr)
        h = z
    return outs


cdef object _with_constant(double[:, ::1] h):
    cdef Py_ssize_t n = h.shape[0], k = h.shape[1], i, j
    phi_arr = np.empty((n, k + 1))
    cdef double[:, ::1] phi = phi_arr
    for i in range(n):
        for j in range(k):
            phi[i, j] = h[i, j]
        phi[i, k] = 1.0
    return phi_arr


def body_features(list weights, list biases, Py_ssize_t[::1] acts, double[::1] bounds, object x):
    return _with_constant(_layer_outputs(weights, biases, acts, bounds, x)[len(weights)])


def loss_and_grads(list weights, list biases, Py_ssize_t[::1] acts, double[::1] bounds,
                   object x, Py_ssize_t[::1] labels, double[:, ::1] head, bint head_grad):
    cdef Py_ssize_t n = x.shape[0], n_class = head.shape[0], m = head.shape[1]
    cdef Py_ssize_t nl = len(weights)
    cdef Py_ssize_t i, j, c, k, li
    if n == 0:
        return (0.0, [np.zeros_like(w) for w in weights], [np.zeros_like(b) for b in biases],
                np.zeros_like(head) if head_grad else None)

    cdef list outs = _layer_outputs(weights, biases, acts, bounds, x)
    cdef double[:, ::1] feat = outs[nl]

    dlog_arr = np.empty((n, n_class))
    cdef double[:, ::1] dlog = dlog_arr
    cdef double loss = 0.0, mx, s, v, bound
    cdef Py_ssize_t y
    for i in range(n):
        mx = -INFINITY
        for c in range(n_class):
            v = head[c, m - 1]
            for k in range(m - 1):
                v += head[c, k] * feat[i, k]
            dlog[i, c] = v
            if v > mx:
                mx = v
        y = labels[i]
        loss -= dlog[i, y] - mx
        s = 0.0
        for c in range(n_class):
            dlog[i, c] = exp(dlog[i, c] - mx)
            s += dlog[i, c]
        loss += log(s)
        for c in range(n_class):
            dlog[i, c] /= s
        dlog[i, y] -= 1.0

    ghead_obj = None
    cdef double[:, ::1] ghead
    if head_grad:
        ghead_obj = np.zeros((n_class, m))
        ghead = ghead_obj
        for i in range(n):
            for c in range(n_class):
                v = dlog[i, c]
                for k in range(m - 1):
                    ghead[c, k] += v * feat[i, k]
                ghead[c, m - 1] += v

    delta_arr = np.zeros((n, m - 1))
    cdef double[:, ::1] delta = delta_arr
    for i in range(n):
        for c in range(n_class):
            v = dlog[i, c]
            for k in range(m - 1):
                delta[i, k] += v * head[c, k]

    gws = [None] * nl
    gbs = [None] * nl
    cdef double[:, ::1] out, inp, w, gw, nxt
    cdef double[::1] gb
    cdef Py_ssize_t act
    cdef int q, p, ni = <int>n
    cdef double one = 1.0, zero = 0.0
    for li in range(nl - 1, -1, -1):
        out = outs[li + 1]
        inp = outs[li]
        w = weights[li]
        q = <int>w.shape[0]
        p = <int>w.shape[1]
        act = acts[li]
        bound = bounds[li]
        if act == RELU:
            for i in range(n):
                for j in range(q):
                    if not out[i, j] > 0.0:
                        delta[i, j] = 0.0
        elif act == CLAMP:
            for i in range(n):
                for j in range(q):
                    if not fabs(out[i, j]) < bound:
                        delta[i, j] = 0.0
        gw_arr = np.empty((q, p))
        gw = gw_arr
        dgemm(&NOTRANS, &TRANS, &p, &q, &ni, &one, &inp[0, 0], &p, &delta[0, 0], &q, &zero, &gw[0, 0], &p)
        gb_arr = np.zeros(q)
        gb = gb_arr
        for i in range(n):
            for j in range(q):
                gb[j] += delta[i, j]
        gws[li] = gw_arr
        gbs[li] = gb_arr
        if li > 0:
            nxt_arr = np.empty((n, p))
            nxt = nxt_arr
            dgemm(&NOTRANS, &NOTRANS, &p, &ni, &q, &one, &w[0, 0], &p, &delta[0, 0], &q, &zero, &nxt[0, 0], &p)
            delta = nxt
    return loss, gws, gbs, ghead_obj


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long t):
    cdef Py_ssize_t i
    cdef double step = lr / (1.0 - beta1 ** t), rc2 = 1.0 / sqrt(1.0 - beta2 ** t), gi
    with nogil:
        for i in range(p.shape[0]):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            p[i] -= step * m[i] / (sqrt(v[i]) * rc2 + eps)


def sgd_update(double[::1] p, double[::1] g, double lr):
    cdef Py_ssize_t i
    for i in range(p.shape[0]):
        p[i] -= lr * g[i]


# --- MAP ascent ------------------------------------------------------------

cdef inline double _expm1_minus_x(double d) noexcept nogil:
    if fabs(d) < 1e-2:
        return d * d * 0.5 * (1.0 + d / 3.0 * (1.0 + d / 4.0 * (1.0 + d / 5.0)))
    return expm1(d) - d


cdef inline double _log1p_minus_x(double s) noexcept nogil:
    cdef double acc = 0.0, sign
    cdef int k
    if fabs(s) < 1e-2:
        for k in range(9, 1, -1):
            sign = 1.0 if (k + 1) % 2 == 0 else -1.0
            acc = s * (sign / k + acc)
        return s * acc
    return log1p(s) - s


cdef double _cumulant_parts(double[:, ::1] eta, double[::1] a) noexcept nogil:
    cdef Py_ssize_t c, k
    cdef double amax = -INFINITY, s = 0.0, v
    for c in range(eta.shape[0]):
        v = 0.0
        for k in range(eta.shape[1]):
            v += eta[c, k] * eta[c, k]
        a[c] = 0.25 * v
        if a[c] > amax:
            amax = a[c]
    for c in range(eta.shape[0]):
        s += exp(a[c] - amax)
    return amax + log(s)


cdef double _cumulant_remainder(double[:, ::1] eta, double[:, ::1] grad, double[::1] a, double lse,
                                double t, double[::1] d1, double[::1] d2) noexcept nogil:
    cdef Py_ssize_t c, k, nc = eta.shape[0]
    cdef double eg, gg, dmax = -INFINITY, d, w, s, lin, second, tmax, total
    for c in range(nc):
        eg = 0.0
        gg = 0.0
        for k in range(eta.shape[1]):
            eg += eta[c, k] * grad[c, k]
            gg += grad[c, k] * grad[c, k]
        d1[c] = 0.5 * t * eg
        d2[c] = 0.25 * t * t * gg
        d = d1[c] + d2[c]
        if d > dmax:
            dmax = d
    lin = 0.0
    if dmax > 30.0:
        tmax = -INFINITY
        for c in range(nc):
            d = a[c] - lse + d1[c] + d2[c]
            if d > tmax:
                tmax = d
        total = 0.0
        for c in range(nc):
            total += exp(a[c] - lse + d1[c] + d2[c] - tmax)
            lin += exp(a[c] - lse) * d1[c]
        total = tmax + log(total)
        if total != total or total == INFINITY:
            return INFINITY
        return total - lin
    s = 0.0
    second = 0.0
    for c in range(nc):
        w = exp(a[c] - lse)
        d = d1[c] + d2[c]
        s += w * expm1(d)
        second += w * d2[c] + w * _expm1_minus_x(d)
    return second + _log1p_minus_x(s)


def map_ascent(eta0, stat_in, double nu, double tol, long max_iters, double armijo):
    eta_arr = np.array(eta0, dtype=np.float64, order="C", copy=True)
    grad_arr = np.empty_like(eta_arr)
    cdef double[:, ::1] eta = eta_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double[:, ::1] stat = np.ascontiguousarray(stat_in, dtype=np.float64)
    cdef Py_ssize_t nc = eta.shape[0], mm = eta.shape[1], c, k
    a_arr = np.empty(nc)
    d1_arr = np.empty(nc)
    d2_arr = np.empty(nc)
    cdef double[::1] a = a_arr
    cdef double[::1] d1 = d1_arr
    cdef double[::1] d2 = d2_arr
    cdef long it = 0
    cdef bint converged = False, accepted
    cdef double lse, w, gnorm = INFINITY, gsq, t, gain
    with nogil:
        while True:
            lse = _cumulant_parts(eta, a)
            gnorm = 0.0
            gsq = 0.0
            for c in range(nc):
                w = 0.5 * nu * exp(a[c] - lse)
                for k in range(mm):
                    grad[c, k] = stat[c, k] - w * eta[c, k]
                    if fabs(grad[c, k]) > gnorm:
                        gnorm = fabs(grad[c, k])
                    gsq += grad[c, k] * grad[c, k]
            if gnorm < tol:
                converged = True
                break
            if it >= max_iters:
                break
            t = 1.0
            accepted = False
            while t > 1e-300:
                gain = t * gsq - nu * _cumulant_remainder(eta, grad, a, lse, t, d1, d2)
                if gain >= armijo * t * gsq:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
            for c in range(nc):
                for k in range(mm):
                    eta[c, k] += t * grad[c, k]
            it += 1
    return eta_arr, it, converged, gnorm
