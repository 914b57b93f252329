"""Hot elementwise kernels with a compiled core and a numpy fallback.

The compiled extension (``_native``) is used when it was built at install
time; otherwise the numpy versions in ``_fallback`` are selected at import.
``use("numpy")`` / ``use("native")`` switches explicitly (tests and the
benchmark compare the two).
"""

from contextlib import contextmanager

import numpy as np

from . import _fallback

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

_impl = _native if _native is not None else _fallback
BACKEND = "native" if _native is not None else "numpy"


def available_backends():
    return ["numpy"] + (["native"] if _native is not None else [])


def use(name):
    """Select the kernel backend by name; returns the previous name."""
    global _impl, BACKEND
    if name == "native":
        if _native is None:
            raise RuntimeError("compiled kernels are not built; reinstall the package")
        impl = _native
    elif name == "numpy":
        impl = _fallback
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    prev = BACKEND
    _impl, BACKEND = impl, name
    return prev


@contextmanager
def backend(name):
    prev = use(name)
    try:
        yield
    finally:
        use(prev)


def _float(a):
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return np.ascontiguousarray(a)


def _groups(a, axis):
    """View ``a`` as (groups, items) with groups along ``axis`` (None = one group)."""
    if axis is None:
        return a.reshape(1, -1), None
    moved = np.moveaxis(a, axis, 0)
    return np.ascontiguousarray(moved).reshape(moved.shape[0], -1), moved.shape


def _ungroup(a2d, shape, axis, like_shape):
    if axis is None:
        return a2d.reshape(like_shape)
    return np.moveaxis(a2d.reshape(shape), 0, axis)


def _vec(v, n):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 1 and n != 1:
        v = np.full(n, v[0])
    return np.ascontiguousarray(v)


def round_half_away(x):
    x = _float(x)
    return _impl.round_half_away(x.reshape(-1)).reshape(x.shape)


def fake_quant_forward(x, scale, zero_point, qmin, qmax, axis=None):
    """Returns (dequantized, code) where code is -1/0/+1 for below/in/above range."""
    x = _float(x)
    x2, shape = _groups(x, axis)
    n = x2.shape[0]
    out, code = _impl.fake_quant_fwd(x2, _vec(scale, n), _vec(zero_point, n), float(qmin), float(qmax))
    return _ungroup(out, shape, axis, x.shape), _ungroup(code, shape, axis, x.shape)


def fake_quant_backward(x, grad, code, scale, zero_point, qmin, qmax, axis=None):
    """Straight-through gradient for x and the per-group gradient for scale."""
    x = _float(x)
    grad = np.ascontiguousarray(np.asarray(grad, dtype=x.dtype))
    x2, shape = _groups(x, axis)
    g2, _ = _groups(grad, axis)
    c2, _ = _groups(np.ascontiguousarray(code), axis)
    n = x2.shape[0]
    gx, gs = _impl.fake_quant_bwd(x2, g2, c2, _vec(scale, n), _vec(zero_point, n), float(qmin), float(qmax))
    return _ungroup(gx, shape, axis, x.shape), gs


def adaround_forward(w, v, scale, zero_point, qmin, qmax, zeta, gamma, hard=False, axis=0):
    """Returns (dequantized weight, d out / d v)."""
    w = _float(w)
    v = np.ascontiguousarray(np.asarray(v, dtype=w.dtype))
    w2, shape = _groups(w, axis)
    v2, _ = _groups(v, axis)
    n = w2.shape[0]
    out, d = _impl.adaround_fwd(w2, v2, _vec(scale, n), _vec(zero_point, n), float(qmin), float(qmax),
                                float(zeta), float(gamma), bool(hard))
    return _ungroup(out, shape, axis, w.shape), _ungroup(d, shape, axis, w.shape)


def gelu_forward(x):
    x = _float(x)
    return _impl.gelu_fwd(x.reshape(-1)).reshape(x.shape)


def gelu_backward(x, grad):
    x = _float(x)
    grad = np.ascontiguousarray(np.asarray(grad, dtype=x.dtype))
    return _impl.gelu_bwd(x.reshape(-1), grad.reshape(-1)).reshape(x.shape)
