"""Uniform affine fake quantizers, AdaRound rounding state and QDrop mixing."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels, ops
from .autograd import Tensor

PER_CHANNEL = "per_channel"
PER_TENSOR = "per_tensor"
SCALE_FLOOR = 1e-8


def int_range(bits, signed=False):
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


@dataclass
class QuantParams:
    """Scale / zero-point of one quantized tensor.

    ``scale`` and ``zero_point`` have one entry per output channel (axis 0)
    for per-channel weights and a single entry for per-tensor activations.
    """

    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    granularity: str = PER_TENSOR
    signed: bool = False

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.granularity not in (PER_CHANNEL, PER_TENSOR):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_TENSOR and self.scale.size != 1:
            raise ValueError("per-tensor params carry a single scale")
        if self.scale.shape != self.zero_point.shape:
            raise ValueError("scale and zero_point must align")
        if not (self.scale > 0).all():
            raise ValueError("scale must be positive")
        lo, hi = self.qrange
        if (self.zero_point < lo).any() or (self.zero_point > hi).any():
            raise ValueError("zero_point outside the integer range")

    @property
    def qrange(self):
        return int_range(self.bits, self.signed)

    @property
    def axis(self):
        return 0 if self.granularity == PER_CHANNEL else None

    def with_scale(self, scale):
        return QuantParams(self.bits, scale, self.zero_point, self.granularity, self.signed)

    def to_dict(self):
        return {"bits": self.bits, "granularity": self.granularity, "signed": self.signed,
                "scale": [float(s) for s in self.scale],
                "zero_point": [int(z) for z in self.zero_point]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["bits"], np.array(d["scale"]), np.array(d["zero_point"]), d["granularity"], d["signed"])


def calibrate_quant_params(x, bits, granularity=PER_TENSOR, clip_quantile=None, signed=False, search_steps=0):
    """Fit scale/zero-point to the (optionally quantile-clipped) range of ``x``.

    The range always contains zero so the zero point is representable. With
    ``clip_quantile=q`` the range is [quantile(1-q), quantile(q)] instead of
    [min, max]. With ``search_steps=k`` (per-tensor only) k ranges evenly
    spaced between the clipped one and [min, max] are tried and the one with
    the smallest squared quantization error wins; the clipped range is the
    tightest candidate. Per-channel statistics are taken over every axis but 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    flat = x.reshape(x.shape[0], -1) if granularity == PER_CHANNEL else x.reshape(1, -1)
    lo_full, hi_full = flat.min(axis=1), flat.max(axis=1)
    if clip_quantile is None:
        return _fit_range(lo_full, hi_full, bits, granularity, signed)
    lo = np.quantile(flat, 1.0 - clip_quantile, axis=1)
    hi = np.quantile(flat, clip_quantile, axis=1)
    if search_steps < 2 or granularity == PER_CHANNEL:
        return _fit_range(lo, hi, bits, granularity, signed)
    best, best_err = None, np.inf
    for t in np.linspace(0.0, 1.0, search_steps):
        q = _fit_range(lo + t * (lo_full - lo), hi + t * (hi_full - hi), bits, granularity, signed)
        err = float(np.square(fake_quantize(flat, q) - flat).sum())
        if err < best_err:
            best, best_err = q, err
    return best


def _fit_range(lo, hi, bits, granularity, signed):
    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    qmin, qmax = int_range(bits, signed)
    scale = (hi - lo) / (qmax - qmin)
    degenerate = scale < SCALE_FLOOR
    scale = np.where(degenerate, SCALE_FLOOR, scale)
    zp = qmin - kernels.round_half_away(lo / scale)
    zp = np.where(degenerate, kernels.round_half_away(np.full(zp.shape, (qmin + qmax) / 2.0)), zp)
    zp = np.clip(zp, qmin, qmax).astype(np.int64)
    return QuantParams(bits, scale, zp, granularity, signed)


def fake_quantize(x, q):
    """clamp(round(x / scale) + zero_point) de-quantized; accepts arrays or Tensors."""
    qmin, qmax = q.qrange
    if isinstance(x, Tensor):
        return ops.fake_quant(x, q.scale, q.zero_point, qmin, qmax, q.axis)
    out, _ = kernels.fake_quant_forward(x, q.scale, q.zero_point, qmin, qmax, q.axis)
    return out


@dataclass
class AdaRoundState:
    """Continuous rounding variables V and the annealed regularizer schedule."""

    v: Tensor
    zeta: float = 1.1
    gamma: float = -0.1
    reg_weight: float = 0.01
    beta_start: float = 18.0
    beta_end: float = 2.0
    warmup: float = 0.2

    @classmethod
    def init(cls, weight, q, **kw):
        """V such that h(V) equals the fractional part of W / scale."""
        w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
        s = q.scale.reshape((-1,) + (1,) * (w.ndim - 1))
        frac = w / s - np.floor(w / s)
        zeta, gamma = kw.get("zeta", cls.zeta), kw.get("gamma", cls.gamma)
        p = (frac - gamma) / (zeta - gamma)
        v = np.log(p / (1.0 - p))
        dtype = weight.dtype if isinstance(weight, Tensor) else np.float32
        return cls(Tensor(v, requires_grad=True, dtype=dtype), **kw)

    def h(self):
        sig = 1.0 / (1.0 + np.exp(-self.v.data.astype(np.float64)))
        return np.clip(sig * (self.zeta - self.gamma) + self.gamma, 0.0, 1.0)

    def beta(self, it, total):
        """Temperature: held during warmup, then annealed linearly start -> end."""
        start = self.warmup * total
        if total <= 0 or it < start:
            return self.beta_start
        frac = (it - start) / max(total - start, 1.0)
        return self.beta_end + (self.beta_start - self.beta_end) * max(0.0, 1.0 - frac)

    def regularizer(self, it, total):
        if it < self.warmup * total:
            return None
        return ops.mul(ops.rounding_regularizer(self.v, self.beta(it, total), self.zeta, self.gamma),
                       self.reg_weight)

    def hard_decisions(self):
        return (self.h() >= 0.5).astype(np.float32)


def adaround_weight(weight, q, state, hard=False):
    """W_hat = scale * (clip(floor(W/scale) + h(V) + zp) - zp); soft mode is differentiable in V."""
    qmin, qmax = q.qrange
    return ops.adaround(weight, state.v, q.scale, q.zero_point, qmin, qmax,
                        state.zeta, state.gamma, hard=hard)


def hardened_weight(weight, q, round_up):
    """Weight quantized with fixed 0/1 rounding decisions."""
    qmin, qmax = q.qrange
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    s = q.scale.reshape((-1,) + (1,) * (w.ndim - 1))
    z = q.zero_point.reshape(s.shape)
    iq = np.clip(np.floor(w / s) + round_up + z, qmin, qmax)
    dtype = weight.dtype if isinstance(weight, Tensor) else np.float32
    return ((iq - z) * s).astype(dtype)


@dataclass
class DropConfig:
    drop_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be within [0, 1]")


def qdrop_activation(x_fp, x_q, cfg, rng):
    """Keep the full-precision value with probability p, else the quantized one."""
    if tuple(x_fp.shape) != tuple(x_q.shape):
        raise ValueError("qdrop inputs must have equal shapes")
    p = cfg.drop_probability
    if p <= 0.0:
        return x_q
    if p >= 1.0:
        return x_fp
    keep_fp = rng.random(x_fp.shape) < p
    return ops.where(keep_fp, x_fp, x_q)


@dataclass
class ActQuantizer:
    """Per-tensor activation quantizer with a learnable log-domain scale."""

    params: QuantParams
    log_scale: Tensor = field(default=None)

    def __post_init__(self):
        if self.log_scale is None:
            self.log_scale = Tensor(np.log(self.params.scale), requires_grad=True, dtype=np.float64)

    @property
    def trainable(self):
        return self.log_scale.requires_grad

    def current(self):
        """Params with the learned scale; a frozen quantizer returns its params unchanged."""
        if not self.trainable:
            return self.params
        return self.params.with_scale(np.exp(self.log_scale.data.astype(np.float64)))

    def __call__(self, x):
        qmin, qmax = self.params.qrange
        scale = ops.exp(self.log_scale) if self.trainable else self.params.scale
        return ops.fake_quant(x, scale, self.params.zero_point, qmin, qmax, None)
