# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_pykernels`` for the reference."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, log1p, cos, sin, acos, exp, floor, M_PI
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

DEF ACOS_CLAMP = 1e-7


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t _next(uint64_t* s) nogil:
    cdef uint64_t result = _rotl(s[0] + s[3], 23) + s[0]
    cdef uint64_t t = s[1] << 17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


def xoshiro_next(cnp.uint64_t[::1] state):
    return int(_next(&state[0]))


def fill_normals(cnp.uint64_t[::1] state, double[::1] out, double mean, double stddev):
    cdef Py_ssize_t i
    cdef double u1, u2, r
    cdef uint64_t* s = &state[0]
    with nogil:
        for i in range(out.shape[0]):
            u1 = (_next(s) >> 11) * (1.0 / 9007199254740992.0)
            u2 = (_next(s) >> 11) * (1.0 / 9007199254740992.0)
            r = sqrt(-2.0 * log(1.0 - u1))
            out[i] = mean + stddev * (r * cos(2.0 * M_PI * u2))


def margin_softmax_rows(cos_in, labels_in, scale_in, int psi_kind,
                        double m_add, int m_mult, double lam):
    cdef double[:, ::1] u = np.ascontiguousarray(cos_in, dtype=np.float64)
    cdef int64_t[::1] labels = np.ascontiguousarray(labels_in, dtype=np.int64)
    cdef double[::1] scale = np.ascontiguousarray(scale_in, dtype=np.float64)
    cdef Py_ssize_t n = u.shape[0], c = u.shape[1], i, j, y
    loss_a = np.empty(n)
    prob_a = np.empty((n, c))
    tl_a = np.empty(n)
    dcos_a = np.empty((n, c))
    ds_a = np.empty(n)
    cdef double[::1] loss = loss_a, tl = tl_a, ds = ds_a
    cdef double[:, ::1] prob = prob_a, dcos = dcos_a
    cdef double t, x, theta, k, sign, psi, dpsi, top, total, rest, v, acc
    if psi_kind < 0 or psi_kind > 2:
        raise ValueError(f"unknown psi kind {psi_kind}")
    with nogil:
        for i in range(n):
            y = labels[i]
            t = u[i, y]
            if psi_kind == 0:
                psi = t
                dpsi = 1.0
            elif psi_kind == 1:
                psi = t - m_add
                dpsi = 1.0
            else:
                x = t
                if x < -1.0 + ACOS_CLAMP:
                    x = -1.0 + ACOS_CLAMP
                if x > 1.0 - ACOS_CLAMP:
                    x = 1.0 - ACOS_CLAMP
                theta = acos(x)
                k = floor(m_mult * theta / M_PI)
                if k < 0:
                    k = 0
                if k > m_mult - 1:
                    k = m_mult - 1
                sign = 1.0 - 2.0 * (<int64_t>k % 2)
                psi = (sign * cos(m_mult * theta) - 2.0 * k + lam * x) / (1.0 + lam)
                if t > -1.0 + ACOS_CLAMP and t < 1.0 - ACOS_CLAMP:
                    dpsi = ((-sign * m_mult * sin(m_mult * theta) - lam * sin(theta)) / (1.0 + lam)
                            * (-1.0 / sqrt(1.0 - x * x)))
                else:
                    dpsi = 0.0
            top = scale[i] * psi
            for j in range(c):
                if j != y and scale[i] * u[i, j] > top:
                    top = scale[i] * u[i, j]
            tl[i] = scale[i] * psi
            rest = 0.0
            for j in range(c):
                if j != y:
                    prob[i, j] = exp(scale[i] * u[i, j] - top)
                    rest += prob[i, j]
            prob[i, y] = exp(tl[i] - top)
            total = prob[i, y] + rest
            if tl[i] >= top:
                loss[i] = log1p(rest)
            else:
                loss[i] = top - tl[i] + log(total)
            acc = 0.0
            for j in range(c):
                prob[i, j] /= total
                v = prob[i, j]
                if j == y:
                    v = -rest / total
                    acc += v * psi
                    dcos[i, j] = v * scale[i] * dpsi
                else:
                    acc += v * u[i, j]
                    dcos[i, j] = v * scale[i]
            ds[i] = acc
    return loss_a, prob_a, tl_a, dcos_a, ds_a


def count_greater(scores_in, mate_in):
    cdef double[:, ::1] s = np.ascontiguousarray(scores_in, dtype=np.float64)
    cdef int64_t[::1] mate = np.ascontiguousarray(mate_in, dtype=np.int64)
    cdef Py_ssize_t p = s.shape[0], g = s.shape[1], i, j
    out_a = np.zeros(p, dtype=np.int64)
    cdef int64_t[::1] out = out_a
    cdef double ms
    cdef const double* row
    cdef int64_t cnt
    with nogil:
        for i in range(p):
            row = &s[i, 0]
            ms = row[mate[i]]
            cnt = 0
            # the mate never scores strictly above itself, so no index test is needed
            for j in range(g):
                cnt += row[j] > ms
            out[i] = cnt
    return out_a
