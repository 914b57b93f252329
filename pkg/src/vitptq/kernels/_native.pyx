# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise kernels for fake quantization, AdaRound and GELU.

Every function mirrors the pure-numpy version in ``_fallback.py`` and takes
C-contiguous arrays. Quantized tensors are viewed as ``(groups, items)``
with one scale/zero-point per group row.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, erf, exp, sqrt, copysign, fmin, fmax, M_PI

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline double _rha(double v) noexcept nogil:
    # round half away from zero; branch-free so loops vectorize
    return copysign(floor(fabs(v) + 0.5), v)


def round_half_away(const real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = <real>_rha(x[i])
    return out


def fake_quant_fwd(const real[:, ::1] x, const double[::1] scale, const double[::1] zp, double qmin, double qmax):
    cdef Py_ssize_t g = x.shape[0], m = x.shape[1], i, j
    cdef double s, z, q
    out = np.empty((g, m), dtype=np.float32 if real is float else np.float64)
    code = np.empty((g, m), dtype=np.int8)
    cdef real[:, ::1] o = out
    cdef signed char[:, ::1] c = code
    with nogil:
        for i in range(g):
            s = scale[i]
            z = zp[i]
            for j in range(m):
                q = _rha(x[i, j] / s) + z
                c[i, j] = <signed char>((q > qmax) - (q < qmin))
                q = fmin(fmax(q, qmin), qmax)
                o[i, j] = <real>((q - z) * s)
    return out, code


def fake_quant_bwd(const real[:, ::1] x, const real[:, ::1] grad, const signed char[:, ::1] code,
                   const double[::1] scale, const double[::1] zp, double qmin, double qmax):
    cdef Py_ssize_t g = x.shape[0], m = x.shape[1], i, j
    cdef double s, z, r, acc, gv
    cdef bint inside
    gx = np.zeros((g, m), dtype=np.float32 if real is float else np.float64)
    gs = np.zeros(g, dtype=np.float64)
    cdef real[:, ::1] ox = gx
    cdef double[::1] os = gs
    with nogil:
        for i in range(g):
            s = scale[i]
            z = zp[i]
            acc = 0.0
            for j in range(m):
                gv = grad[i, j]
                r = x[i, j] / s
                inside = code[i, j] == 0
                ox[i, j] = <real>(gv if inside else 0.0)
                acc += gv * ((_rha(r) - r) if inside else ((qmin - z) if code[i, j] < 0 else (qmax - z)))
            os[i] = acc
    return gx, gs


def adaround_fwd(const real[:, ::1] w, const real[:, ::1] v, const double[::1] scale, const double[::1] zp,
                 double qmin, double qmax, double zeta, double gamma, bint hard):
    cdef Py_ssize_t g = w.shape[0], m = w.shape[1], i, j
    cdef double s, z, h, q, sig
    out = np.empty((g, m), dtype=np.float32 if real is float else np.float64)
    dmask = np.empty((g, m), dtype=np.float64)
    cdef real[:, ::1] o = out
    cdef double[:, ::1] d = dmask
    with nogil:
        for i in range(g):
            s = scale[i]
            z = zp[i]
            for j in range(m):
                sig = 1.0 / (1.0 + exp(-v[i, j]))
                h = sig * (zeta - gamma) + gamma
                if h <= 0.0:
                    h = 0.0
                    d[i, j] = 0.0
                elif h >= 1.0:
                    h = 1.0
                    d[i, j] = 0.0
                else:
                    d[i, j] = (zeta - gamma) * sig * (1.0 - sig)
                if hard:
                    h = 1.0 if h >= 0.5 else 0.0
                q = floor(w[i, j] / s) + h + z
                if q < qmin:
                    q = qmin
                    d[i, j] = 0.0
                elif q > qmax:
                    q = qmax
                    d[i, j] = 0.0
                o[i, j] = <real>((q - z) * s)
                d[i, j] = d[i, j] * s
    return out, dmask


def gelu_fwd(const real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, k = 1.0 / sqrt(2.0)
    out = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] o = out
    with nogil:
        for i in range(n):
            v = x[i]
            o[i] = <real>(0.5 * v * (1.0 + erf(v * k)))
    return out


def gelu_bwd(const real[::1] x, const real[::1] grad):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, k = 1.0 / sqrt(2.0), c = 1.0 / sqrt(2.0 * M_PI)
    out = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] o = out
    with nogil:
        for i in range(n):
            v = x[i]
            o[i] = <real>(grad[i] * (0.5 * (1.0 + erf(v * k)) + v * c * exp(-0.5 * v * v)))
    return out
