"""Pure-numpy versions of the compiled kernels (same signatures and results)."""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _rha(v):
    return np.where(v >= 0, np.floor(v + 0.5), -np.floor(-v + 0.5))


def round_half_away(x):
    return _rha(x.astype(np.float64)).astype(x.dtype)


def fake_quant_fwd(x, scale, zp, qmin, qmax):
    s = scale[:, None]
    z = zp[:, None]
    q = _rha(x / s) + z
    code = np.zeros(x.shape, dtype=np.int8)
    code[q < qmin] = -1
    code[q > qmax] = 1
    q = np.clip(q, qmin, qmax)
    return ((q - z) * s).astype(x.dtype), code


def fake_quant_bwd(x, grad, code, scale, zp, qmin, qmax):
    s = scale[:, None]
    z = zp[:, None]
    inside = code == 0
    gx = np.where(inside, grad, 0).astype(x.dtype)
    r = x / s
    ds = np.where(inside, _rha(r) - r, np.where(code < 0, qmin - z, qmax - z))
    gs = (grad.astype(np.float64) * ds).sum(axis=1)
    return gx, gs


def adaround_fwd(w, v, scale, zp, qmin, qmax, zeta, gamma, hard):
    s = scale[:, None]
    z = zp[:, None]
    sig = 1.0 / (1.0 + np.exp(-v.astype(np.float64)))
    raw = sig * (zeta - gamma) + gamma
    d = np.where((raw > 0) & (raw < 1), (zeta - gamma) * sig * (1 - sig), 0.0)
    h = np.clip(raw, 0.0, 1.0)
    if hard:
        h = (h >= 0.5).astype(np.float64)
    q = np.floor(w / s) + h + z
    d = np.where((q < qmin) | (q > qmax), 0.0, d)
    q = np.clip(q, qmin, qmax)
    return ((q - z) * s).astype(w.dtype), d * s


def gelu_fwd(x):
    xd = x.astype(np.float64)
    return (0.5 * xd * (1.0 + erf(xd * _INV_SQRT2))).astype(x.dtype)


def gelu_bwd(x, grad):
    xd = x.astype(np.float64)
    dx = 0.5 * (1.0 + erf(xd * _INV_SQRT2)) + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return (grad * dx).astype(x.dtype)
