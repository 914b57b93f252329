"""Perturbation estimates of output-Hessian diagonals and the reconstruction losses.

For a block output O the distillation loss L(f(O'), f(O)) (f = the rest of
the network) is zero with zero gradient at O' = O, so its local behaviour is
governed by the Hessian. Perturbing O by +/- delta along a probe direction r
and differencing the two backward-pass Jacobians gives

    (J(O + delta r) - J(O - delta r)) / (2 delta)  ~=  H r

which, multiplied elementwise by r, estimates diag(H). Probe choices:

* ``"ones"``        r = 1 everywhere (the literal simultaneous shift).
* ``"rademacher"``  r = random +/-1 per sample; unbiased for diag(H).
* ``"coordinate"``  one basis vector at a time; exact up to O(delta^2) but
                    costs two tail passes per coordinate.

All four losses use one reduction: sum over token x channel, mean over batch.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tape, Tensor

KL_CLASSIFICATION = "kl_classification"
KL_PLUS_SMOOTH_L1 = "kl_plus_smooth_l1"
SQUARED_ERROR = "squared_error"
LOSS_KINDS = (KL_CLASSIFICATION, KL_PLUS_SMOOTH_L1, SQUARED_ERROR)
DIRECTIONS = ("ones", "rademacher", "coordinate")


class HessianEstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationConfig:
    delta: float = 1e-6
    loss_kind: str = KL_CLASSIFICATION
    direction: str = "rademacher"
    kl_teacher_first: bool = True
    batch_size: int = 128
    seed: int = 0
    num_classes: int = 10

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown probe direction {self.direction!r}")


@dataclass
class JacobianPair:
    j_plus: np.ndarray
    j_minus: np.ndarray

    def __post_init__(self):
        if self.j_plus.shape != self.j_minus.shape:
            raise ValueError("jacobian shapes differ")
        if not (np.isfinite(self.j_plus).all() and np.isfinite(self.j_minus).all()):
            raise HessianEstimationError("non-finite jacobian entries")


@dataclass
class HessianDiagonal:
    """Sample-averaged diagonal; ``raw`` keeps negative entries, ``values`` is clamped at 0."""

    raw: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not np.isfinite(self.raw).all():
            raise HessianEstimationError("non-finite Hessian entries")

    @property
    def values(self):
        return np.maximum(self.raw, 0.0)

    @property
    def shape(self):
        return self.raw.shape

    def token_importance(self):
        """Mean over channels, one value per token (class token first)."""
        return self.values.mean(axis=-1)

    def channel_importance(self):
        return self.values.mean(axis=0)


def perturb_outputs(O, delta, direction=None):
    """(O + delta r, O - delta r), computed in float64; r defaults to all-ones."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    O = np.asarray(O, dtype=np.float64)
    r = np.ones_like(O) if direction is None else np.asarray(direction, dtype=np.float64)
    return O + delta * r, O - delta * r


def distill_loss(student_logits, teacher_logits, cfg):
    """KL between logits (teacher || student by default); teacher gets no gradient.

    ``squared_error`` (sum over a sample, mean over the batch) is a diagnostic
    loss with a known constant Hessian of 2. ``kl_plus_smooth_l1`` treats the
    tail output as class logits plus box regressions split by
    ``cfg.num_classes`` columns.
    """
    if cfg.loss_kind == SQUARED_ERROR:
        return _weighted_sse(student_logits, teacher_logits.data, None)
    if cfg.loss_kind == KL_PLUS_SMOOTH_L1:
        c = cfg.num_classes
        s, t = student_logits, teacher_logits.data
        return ops.kl_plus_smooth_l1(ops.index(s, (Ellipsis, slice(0, c))), t[..., :c],
                                     ops.index(s, (Ellipsis, slice(c, None))), t[..., c:])
    if cfg.kl_teacher_first:
        return ops.kl_divergence_logits(student_logits, teacher_logits)
    # reverse direction: KL(student || teacher), still differentiated in the student only
    s = student_logits
    lt = teacher_logits.data - teacher_logits.data.max(axis=-1, keepdims=True)
    lt = lt - np.log(np.exp(lt).sum(axis=-1, keepdims=True))
    ls = ops.log_softmax(s)
    n = s.size // s.shape[-1]
    return ops.mul(ops.sum(ops.mul(ops.exp(ls), ops.sub(ls, lt))), 1.0 / n)


def _as_tail_input(model, arr):
    return Tensor._wrap(np.asarray(arr, dtype=model.dtype))


def tail_jacobian(model, block_index, O_ref, O_eval, cfg=PerturbationConfig()):
    """Per-sample gradient of L(f(O_eval), f(O_ref)) with respect to O_eval.

    ``O_ref`` / ``O_eval`` are batches shaped like the block output. The
    teacher branch f(O_ref) is a constant. Pass a float64 copy of the model
    (``model.copy(np.float64)``) for perturbation-sized differences.
    """
    O_ref = np.asarray(O_ref)
    O_eval = np.asarray(O_eval)
    if O_ref.shape != O_eval.shape:
        raise ValueError("O_ref and O_eval must have the same shape")
    out = np.empty(O_eval.shape, dtype=np.float64)
    bs = cfg.batch_size
    for j in range(0, len(O_eval), bs):
        ref = _as_tail_input(model, O_ref[j:j + bs])
        teacher = model.forward_tail(block_index, ref).detach()
        x = _as_tail_input(model, O_eval[j:j + bs])
        x.requires_grad = True
        with Tape() as tape:
            loss = distill_loss(model.forward_tail(block_index, x), teacher, cfg)
        if not np.isfinite(loss.data).all():
            raise HessianEstimationError(f"non-finite distillation loss at block {block_index}")
        g = tape.backward(loss).array(x)
        # the loss is a batch mean; undo it to get per-sample jacobians
        out[j:j + bs] = g * len(x.data)
    if not np.isfinite(out).all():
        raise HessianEstimationError(f"non-finite jacobian at block {block_index}")
    return out


def per_sample_hessian_diag(j, delta, direction=None):
    """(J+ - J-) / (2 delta), times the probe direction when one was used."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    h = (j.j_plus - j.j_minus) / (2.0 * delta)
    if direction is not None:
        h = h * direction
    return h


def probe_directions(shape, direction, rng):
    if direction == "ones":
        return np.ones(shape)
    if direction == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=shape)
    raise ValueError(f"direction {direction!r} has no single probe vector")


def estimate_per_sample_hessians(model, block_index, O, cfg=PerturbationConfig(), coords=None):
    """Per-sample diagonal estimates for a batch of block outputs ``O`` (N, T, D).

    ``model`` should be a float64 copy. In ``"coordinate"`` mode ``coords``
    (flat indices into T*D) restricts the probed entries; others stay 0.
    """
    O = np.asarray(O, dtype=np.float64)
    if cfg.direction == "coordinate":
        return np.stack([coordinate_hessian_diag(model, block_index, o, cfg, coords) for o in O])
    rng = np.random.default_rng([cfg.seed, block_index])
    r = probe_directions(O.shape, cfg.direction, rng)
    o_plus, o_minus = perturb_outputs(O, cfg.delta, r)
    pair = JacobianPair(tail_jacobian(model, block_index, O, o_plus, cfg),
                        tail_jacobian(model, block_index, O, o_minus, cfg))
    return per_sample_hessian_diag(pair, cfg.delta, r)


def coordinate_hessian_diag(model, block_index, o, cfg=PerturbationConfig(), coords=None):
    """Diagonal of one sample via one basis-vector probe per coordinate."""
    o = np.asarray(o, dtype=np.float64)
    n = o.size
    coords = np.arange(n) if coords is None else np.asarray(coords)
    out = np.zeros(n)
    for j in range(0, len(coords), cfg.batch_size):
        cs = coords[j:j + cfg.batch_size]
        e = np.zeros((len(cs), n))
        e[np.arange(len(cs)), cs] = 1.0
        e = e.reshape((len(cs),) + o.shape)
        ref = np.broadcast_to(o, e.shape)
        o_plus, o_minus = perturb_outputs(ref, cfg.delta, e)
        pair = JacobianPair(tail_jacobian(model, block_index, ref, o_plus, cfg),
                            tail_jacobian(model, block_index, ref, o_minus, cfg))
        h = per_sample_hessian_diag(pair, cfg.delta, e).reshape(len(cs), n)
        out[cs] = h[np.arange(len(cs)), cs]
    return out.reshape(o.shape)


def tail_loss(model, block_index, o_ref, o_eval, cfg=PerturbationConfig()):
    """Scalar distillation loss for a single sample (no gradients)."""
    ref = _as_tail_input(model, np.asarray(o_ref)[None])
    ev = _as_tail_input(model, np.asarray(o_eval)[None])
    return float(distill_loss(model.forward_tail(block_index, ev),
                              model.forward_tail(block_index, ref), cfg).data)


def finite_difference_hessian_diag(model, block_index, o, coords, step=1e-4, cfg=PerturbationConfig()):
    """Second-order central differences of the loss itself (no backward pass)."""
    o = np.asarray(o, dtype=np.float64)
    flat = o.reshape(-1)
    base = tail_loss(model, block_index, o, o, cfg)
    out = []
    for c in coords:
        e = np.zeros_like(flat)
        e[c] = step
        lp = tail_loss(model, block_index, o, (flat + e).reshape(o.shape), cfg)
        lm = tail_loss(model, block_index, o, (flat - e).reshape(o.shape), cfg)
        out.append((lp - 2.0 * base + lm) / step ** 2)
    return np.array(out)


def average_hessian(per_sample):
    """Arithmetic mean over samples (fixed summation order)."""
    per_sample = [np.asarray(h, dtype=np.float64) for h in per_sample]
    if not per_sample:
        raise ValueError("average_hessian needs at least one sample")
    shape = per_sample[0].shape
    if any(h.shape != shape for h in per_sample):
        raise ValueError("per-sample Hessians must share one shape")
    total = np.zeros(shape)
    for h in per_sample:
        total = total + h
    return HessianDiagonal(total / len(per_sample), len(per_sample))


def teacher_gradients(model, block_index, O, batch_size=128):
    """Per-sample dL/dO of cross-entropy against the model's own predictions."""
    O = np.asarray(O)
    out = np.empty(O.shape, dtype=np.float64)
    for j in range(0, len(O), batch_size):
        x = _as_tail_input(model, O[j:j + batch_size])
        x.requires_grad = True
        with Tape() as tape:
            logits = model.forward_tail(block_index, x)
            loss = ops.cross_entropy(logits, logits.data.argmax(axis=-1))
        out[j:j + batch_size] = tape.backward(loss).array(x) * len(x.data)
    return out


# -- reconstruction losses --------------------------------------------------

def _batch(x):
    return x.shape[0] if x.ndim >= 2 else 1


def _weighted_sse(O_hat, O, weight):
    O_hat = O_hat if isinstance(O_hat, Tensor) else Tensor._wrap(np.asarray(O_hat, dtype=np.float64))
    err = ops.square(ops.sub(O_hat, np.asarray(O, dtype=O_hat.dtype)))
    if weight is not None:
        err = ops.mul(err, np.asarray(weight, dtype=O_hat.dtype))
    return ops.mul(ops.sum(err), 1.0 / _batch(O_hat))


def mse_loss(O_hat, O):
    return _weighted_sse(O_hat, O, None)


def aph_loss(O_hat, O, H):
    """Errors weighted by the sample-averaged Hessian diagonal (shared by every sample)."""
    w = H.values if isinstance(H, HessianDiagonal) else np.asarray(H)
    return _weighted_sse(O_hat, O, w)


def ph_loss(O_hat, O, per_sample_H):
    """Errors weighted by each sample's own Hessian diagonal."""
    if np.shape(per_sample_H) != tuple(np.shape(O)):
        raise ValueError("per-sample Hessians must align with the batch")
    return _weighted_sse(O_hat, O, per_sample_H)


def bh_loss(O_hat, O, grad_O):
    """Squared gradient-weighted error: sum(((O_hat - O) * dL/dO)^2)."""
    return _weighted_sse(O_hat, O, np.square(np.asarray(grad_O)))
