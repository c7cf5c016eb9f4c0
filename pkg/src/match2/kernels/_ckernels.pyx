# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pairwise kernels; same contracts as ``_pykernels``.

Accumulation is always in double precision.
"""

import numpy as np

from libc.math cimport fabs, sqrt, log

ctypedef fused real:
    float
    double

cdef double LN2 = 0.6931471805599453


def pairwise_l1(real[:, :, ::1] x, real[:, :, ::1] y):
    cdef Py_ssize_t N = x.shape[0], m = x.shape[1], w = x.shape[2], n = y.shape[1]
    out = np.zeros((N, m, n), dtype=np.asarray(x).dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t b, i, j, t
    cdef double acc
    with nogil:
        for b in range(N):
            for i in range(m):
                for j in range(n):
                    acc = 0.0
                    for t in range(w):
                        acc = acc + fabs(<double>x[b, i, t] - <double>y[b, j, t])
                    o[b, i, j] = <real>acc
    return out


def pairwise_l1_backward(real[:, :, ::1] x, real[:, :, ::1] y, real[:, :, ::1] coef):
    cdef Py_ssize_t N = x.shape[0], m = x.shape[1], w = x.shape[2], n = y.shape[1]
    dx_arr = np.zeros((N, m, w), dtype=np.float64)
    dy_arr = np.zeros((N, n, w), dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[:, :, ::1] dy = dy_arr
    cdef Py_ssize_t b, i, j, t
    cdef double c, d, s
    with nogil:
        for b in range(N):
            for i in range(m):
                for j in range(n):
                    c = coef[b, i, j]
                    if c == 0.0:
                        continue
                    for t in range(w):
                        # branch-free sign keeps the inner loop vectorisable
                        d = <double>x[b, i, t] - <double>y[b, j, t]
                        s = c * ((d > 0) - (d < 0))
                        dx[b, i, t] += s
                        dy[b, j, t] -= s
    return dx_arr.astype(np.asarray(x).dtype), dy_arr.astype(np.asarray(y).dtype)


def pairwise_l2(real[:, :, ::1] x, real[:, :, ::1] y):
    cdef Py_ssize_t N = x.shape[0], m = x.shape[1], w = x.shape[2], n = y.shape[1]
    out = np.zeros((N, m, n), dtype=np.asarray(x).dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t b, i, j, t
    cdef double acc, d
    with nogil:
        for b in range(N):
            for i in range(m):
                for j in range(n):
                    acc = 0.0
                    for t in range(w):
                        d = <double>x[b, i, t] - <double>y[b, j, t]
                        acc = acc + d * d
                    o[b, i, j] = <real>sqrt(acc)
    return out


def pairwise_l2_backward(real[:, :, ::1] x, real[:, :, ::1] y, real[:, :, ::1] dist, real[:, :, ::1] coef):
    cdef Py_ssize_t N = x.shape[0], m = x.shape[1], w = x.shape[2], n = y.shape[1]
    dx_arr = np.zeros((N, m, w), dtype=np.float64)
    dy_arr = np.zeros((N, n, w), dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[:, :, ::1] dy = dy_arr
    cdef Py_ssize_t b, i, j, t
    cdef double c, d, e
    with nogil:
        for b in range(N):
            for i in range(m):
                for j in range(n):
                    e = dist[b, i, j]
                    if e <= 0.0:
                        continue
                    c = coef[b, i, j] / e
                    for t in range(w):
                        d = (<double>x[b, i, t] - <double>y[b, j, t]) * c
                        dx[b, i, t] += d
                        dy[b, j, t] -= d
    return dx_arr.astype(np.asarray(x).dtype), dy_arr.astype(np.asarray(y).dtype)


def pairwise_jsd(real[:, :, ::1] p, real[:, :, ::1] q):
    cdef Py_ssize_t N = p.shape[0], m = p.shape[1], w = p.shape[2], n = q.shape[1]
    out = np.zeros((N, m, n), dtype=np.asarray(p).dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t b, i, j, t
    cdef double acc, a, c, mid, ta, tc
    with nogil:
        for b in range(N):
            for i in range(m):
                for j in range(n):
                    acc = 0.0
                    for t in range(w):
                        a = p[b, i, t]
                        c = q[b, j, t]
                        mid = 0.5 * (a + c)
                        ta = a * log(a / mid) if a > 0 else 0.0
                        tc = c * log(c / mid) if c > 0 else 0.0
                        # one commutative add per term keeps jsd(p, q) == jsd(q, p) bitwise
                        acc = acc + (ta + tc)
                    o[b, i, j] = <real>(0.5 * acc / LN2)
    return out


def pairwise_jsd_backward(real[:, :, ::1] p, real[:, :, ::1] q, real[:, :, ::1] coef):
    cdef Py_ssize_t N = p.shape[0], m = p.shape[1], w = p.shape[2], n = q.shape[1]
    dp_arr = np.zeros((N, m, w), dtype=np.float64)
    dq_arr = np.zeros((N, n, w), dtype=np.float64)
    cdef double[:, :, ::1] dp = dp_arr
    cdef double[:, :, ::1] dq = dq_arr
    cdef Py_ssize_t b, i, j, t
    cdef double k, a, c, mid
    with nogil:
        for b in range(N):
            for i in range(m):
                for j in range(n):
                    k = 0.5 * coef[b, i, j] / LN2
                    if k == 0.0:
                        continue
                    for t in range(w):
                        a = p[b, i, t]
                        c = q[b, j, t]
                        mid = 0.5 * (a + c)
                        if a > 0:
                            dp[b, i, t] += k * log(a / mid)
                        if c > 0:
                            dq[b, j, t] += k * log(c / mid)
    return dp_arr.astype(np.asarray(p).dtype), dq_arr.astype(np.asarray(q).dtype)
