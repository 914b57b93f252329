"""Differentiable primitives over :class:`~vitptq.autograd.Tensor`.

Every function accepts Tensors, numpy arrays or Python scalars (the latter
two become constants). Backward rules return gradients in the parent's
shape; broadcasting is undone by summing.
"""

import numpy as np

from . import kernels
from .autograd import Tensor, active_tape


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _out(arr, parents, backward):
    tape = active_tape()
    rg = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, rg)
    if rg:
        tape.record(out, parents, backward)
    return out


def unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    nd = grad.ndim - len(shape)
    if nd > 0:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return _out(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return _out(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b),
                lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _out(out, (a, b),
                lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    a = _t(a)
    return _out(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = _t(a)
    ad = a.data
    return _out(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a):
    a = _t(a)
    out = np.exp(a.data)
    return _out(out, (a,), lambda g: (g * out,))


def minimum(a, value):
    """Elementwise min against a constant; gradient passes where a < value."""
    a = _t(a)
    ad = a.data
    keep = ad < value
    return _out(np.where(keep, ad, np.asarray(value, dtype=ad.dtype)), (a,), lambda g: (g * keep,))


def where(mask, a, b):
    """Select a where mask else b (mask is a constant boolean array)."""
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    m = np.asarray(mask, dtype=bool)

    def back(g):
        ga = g * m
        return unbroadcast(ga, a.shape), unbroadcast(g - ga, b.shape)

    return _out(np.where(m, a.data, b.data), (a, b), back)


# -- reductions ------------------------------------------------------------

def sum(a, axis=None, keepdims=False):
    a = _t(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _out(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    a = _t(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape):
    a = _t(a)
    old = a.shape
    return _out(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = _t(a)
    inv = np.argsort(axes)
    return _out(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx):
    a = _t(a)
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _out(a.data[idx], (a,), back)


def concat(tensors, axis=0):
    ts = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _out(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                lambda g: tuple(np.split(g, cuts, axis=axis)))


def broadcast_to(a, shape):
    a = _t(a)
    s = a.shape
    return _out(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, s),))


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} x {bd.shape}")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _out(ad @ bd, (a, b), back)


def linear(x, weight, bias=None):
    """x @ weight.T + bias with weight shaped (out_features, in_features)."""
    x, weight = _t(x), _t(weight)
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {xd.shape}, weight {wd.shape}")
    out = xd @ wd.T
    parents = (x, weight)
    if bias is not None:
        bias = _t(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _out(out, parents, back)


# -- activations & normalization ------------------------------------------

def relu(x):
    x = _t(x)
    mask = x.data > 0  # derivative at exactly 0 is 0
    return _out(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x):
    """Exact erf-based GELU, x * Phi(x)."""
    x = _t(x)
    xd = x.data
    return _out(kernels.gelu_forward(xd), (x,), lambda g: (kernels.gelu_backward(xd, g),))


def softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _out(p, (x,), back)


def log_softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _out(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layernorm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis then apply the affine gamma/beta."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layernorm params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _out(out.astype(xd.dtype), (x, gamma, beta), back)


# -- distillation losses ---------------------------------------------------

def kl_divergence_logits(student, teacher):
    """Mean over samples of KL(softmax(teacher) || softmax(student)).

    The class axis is the last one. The teacher is treated as a constant.
    """
    student, teacher = _t(student), _t(teacher)
    if student.shape != teacher.shape:
        raise ValueError(f"logit shapes differ: {student.shape} vs {teacher.shape}")
    s = student.data.astype(np.float64)
    t = teacher.data.astype(np.float64)
    ls = s - s.max(axis=-1, keepdims=True)
    ls = ls - np.log(np.exp(ls).sum(axis=-1, keepdims=True))
    lt = t - t.max(axis=-1, keepdims=True)
    lt = lt - np.log(np.exp(lt).sum(axis=-1, keepdims=True))
    pt = np.exp(lt)
    n = s.size // s.shape[-1]
    value = max((pt * (lt - ls)).sum() / n, 0.0)
    ps = np.exp(ls)

    def back(g):
        return (g * (ps - pt) / n).astype(student.dtype), None

    return _out(np.asarray(value, dtype=student.dtype), (student, teacher), back)


def cross_entropy(logits, labels):
    """Mean cross-entropy against integer labels."""
    logits = _t(logits)
    labels = np.asarray(labels)
    s = logits.data.astype(np.float64)
    ls = s - s.max(axis=-1, keepdims=True)
    ls = ls - np.log(np.exp(ls).sum(axis=-1, keepdims=True))
    n = labels.size
    rows = np.arange(n)
    value = -ls.reshape(n, -1)[rows, labels.reshape(-1)].sum() / n

    def back(g):
        p = np.exp(ls).reshape(n, -1)
        p[rows, labels.reshape(-1)] -= 1.0
        return ((g / n) * p.reshape(s.shape)).astype(logits.dtype),

    return _out(np.asarray(value, dtype=logits.dtype), (logits,), back)


def smooth_l1(a, b, beta=1.0):
    """Elementwise-mean smooth L1 (Huber with threshold ``beta``)."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    ad = np.abs(d)
    quad = ad < beta
    value = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).mean()
    grad = np.where(quad, d / beta, np.sign(d)) / d.size

    def back(g):
        return (g * grad).astype(a.dtype), (-g * grad).astype(b.dtype)

    return _out(np.asarray(value, dtype=a.dtype), (a, b), back)


def kl_plus_smooth_l1(cls_student, cls_teacher, reg_student, reg_teacher, weight=1.0):
    return add(kl_divergence_logits(cls_student, cls_teacher),
               mul(smooth_l1(reg_student, reg_teacher), weight))


# -- quantization primitives ----------------------------------------------

def fake_quant(x, scale, zero_point, qmin, qmax, axis=None):
    """Uniform affine quantize-dequantize.

    ``scale`` is a Tensor (learnable) or array with one entry per group along
    ``axis`` (a single entry when axis is None). Gradient to x is
    straight-through inside the clamp range; gradient to scale follows the
    usual step-size estimator.
    """
    x = _t(x)
    scale = _t(scale, x)
    sd = np.asarray(scale.data, dtype=np.float64)
    zp = np.asarray(zero_point, dtype=np.float64)
    out, code = kernels.fake_quant_forward(x.data, sd, zp, qmin, qmax, axis)
    sshape = scale.shape

    def back(g):
        gx, gs = kernels.fake_quant_backward(x.data, g, code, sd, zp, qmin, qmax, axis)
        if scale.size == 1:
            gs = np.asarray(gs.sum())
        return gx, gs.reshape(sshape).astype(scale.dtype)

    return _out(out, (x, scale), back)


def adaround(weight, v, scale, zero_point, qmin, qmax, zeta=1.1, gamma=-0.1, hard=False):
    """Weight quantization with learnable rounding offsets ``v`` (per-row scales)."""
    weight, v = _t(weight), _t(v)
    out, dv = kernels.adaround_forward(weight.data, v.data, scale, zero_point, qmin, qmax,
                                       zeta, gamma, hard=hard, axis=0)
    if hard:
        return _out(out, (weight,), lambda g: (None,))
    return _out(out, (weight, v), lambda g: (None, (g * dv).astype(v.dtype)))


def rounding_regularizer(v, beta, zeta=1.1, gamma=-0.1):
    """Sum of 1 - |2 h(v) - 1|^beta with h the rectified sigmoid."""
    v = _t(v)
    sig = 1.0 / (1.0 + np.exp(-v.data.astype(np.float64)))
    raw = sig * (zeta - gamma) + gamma
    h = np.clip(raw, 0.0, 1.0)
    u = 2.0 * h - 1.0
    au = np.abs(u)
    value = (1.0 - au ** beta).sum()

    def back(g):
        dh = np.where((raw > 0) & (raw < 1), (zeta - gamma) * sig * (1 - sig), 0.0)
        du = -beta * au ** (beta - 1) * np.sign(u) * 2.0
        return ((g * du * dh).astype(v.dtype),)

    return _out(np.asarray(value, dtype=v.dtype), (v,), back)


def primitive(arr, parents, backward):
    """Record a custom primitive: ``backward(g)`` returns one gradient (or None) per parent."""
    return _out(arr, tuple(parents), backward)
