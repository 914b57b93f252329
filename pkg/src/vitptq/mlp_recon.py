"""Swap an MLP's GELU for ReLU and retrain FC1/FC2 by Hessian-weighted distillation.

The student is trained on two outputs of the same ReLU MLP: the direct one
and one whose hidden activations are clamped at the p-quantile of their
positive values. The total loss is ``direct + alpha * clamp``; the direct
term keeps gradients alive for clamped units.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tape, Tensor, no_grad
from .hessian import HessianDiagonal, _weighted_sse
from .optim import Adam
from .vit import GELU, RELU

log = logging.getLogger(__name__)


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpReconConfig:
    alpha: float = 2.0
    quantile_p: float = 0.99
    learning_rate: float = 1e-3
    max_iterations: int = 2000
    batch_size: int = 32
    per_batch_threshold: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.quantile_p < 1:
            raise ValueError("quantile_p must be in (0, 1)")
        if self.max_iterations < 0 or self.batch_size < 1:
            raise ValueError("max_iterations must be >= 0 and batch_size >= 1")


@dataclass
class MlpReconState:
    """Tensors of one distillation step."""

    o_gelu: np.ndarray
    a_fc2: Tensor
    o_direct: Tensor
    o_clamp: Tensor
    clamp_threshold: float | None


def swap_activation(block):
    if block.activation != GELU:
        raise ValueError(f"block activation is already {block.activation!r}; expected GELU")
    block.activation = RELU
    return block


def _weights(H):
    return H.values if isinstance(H, HessianDiagonal) else H


def direct_loss(o_direct, o_gelu, H):
    return _weighted_sse(o_direct, o_gelu, _weights(H))


def clamp_loss(o_clamp, o_gelu, H):
    return _weighted_sse(o_clamp, o_gelu, _weights(H))


def positive_quantile(a, p):
    a = np.asarray(a)
    pos = a[a > 0]
    if pos.size == 0:
        return None
    return float(np.quantile(pos.astype(np.float64), p))


def clamp_hidden(a, p, threshold=None):
    """min(a, Quantile_p(positive a)); returns (clamped, threshold).

    With no positive entries the threshold is undefined: ``a`` passes
    through unchanged and the returned threshold is None.
    """
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    t = positive_quantile(data, p) if threshold is None else threshold
    if t is None:
        return a, None
    return ops.minimum(a, t), t


def mlp_params(block):
    return [block.fc1.weight, block.fc1.bias, block.fc2.weight, block.fc2.bias]


def distill_forward(block, x, o_gelu, H, cfg, threshold=None):
    a = block.mlp_hidden(x)
    o_direct = block.fc2(a)
    clamped, t = clamp_hidden(a, cfg.quantile_p, threshold)
    o_clamp = block.fc2(clamped)
    loss = direct_loss(o_direct, o_gelu, H)
    if cfg.alpha:
        loss = ops.add(loss, ops.mul(clamp_loss(o_clamp, o_gelu, H), cfg.alpha))
    return loss, MlpReconState(np.asarray(o_gelu), a, o_direct, o_clamp, t)


def distill_step(block, x, o_gelu, H, cfg, optimizer, threshold=None):
    """One optimizer step on FC1/FC2; returns the distillation loss before the step."""
    if block.activation != RELU:
        raise ValueError("distill_step needs a ReLU block; call swap_activation first")
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x))
    with Tape() as tape:
        loss, state = distill_forward(block, x, o_gelu, H, cfg, threshold)
    value = float(loss.data)
    if not np.isfinite(value):
        raise ReconstructionError(f"non-finite distillation loss (threshold={state.clamp_threshold})")
    optimizer.step(tape.backward(loss))
    return value


def mlp_io(block, inputs, batch_size=256):
    """(MLP input, MLP output) of a full-precision block for block inputs (N, T, D)."""
    xs, ys = [], []
    with no_grad():
        for j in range(0, len(inputs), batch_size):
            r = block.attention_residual(Tensor._wrap(np.asarray(inputs[j:j + batch_size])))
            m = block.mlp_input(r)
            xs.append(m.data)
            ys.append(block.mlp(m).data)
    return np.concatenate(xs), np.concatenate(ys)


def hidden_activations(block, x, batch_size=256):
    with no_grad():
        return np.concatenate([block.mlp_hidden(Tensor._wrap(x[j:j + batch_size])).data
                               for j in range(0, len(x), batch_size)])


def range_stats(hidden):
    h = np.asarray(hidden, dtype=np.float64).reshape(-1)
    return {"q0.99": float(np.quantile(h, 0.99)), "q0.999": float(np.quantile(h, 0.999)),
            "q0.01": float(np.quantile(h, 0.01)), "max": float(h.max()), "min": float(h.min())}


def reconstruct_mlp(block, inputs, H, cfg=MlpReconConfig(), targets=None):
    """Swap to ReLU and distill the block's MLP towards its GELU outputs.

    ``inputs`` are block inputs (N, T, D) from the full-precision model; the
    GELU teacher outputs are captured once before the swap. Returns the
    block (modified in place) and a report with loss curve and range stats.
    """
    x_mlp, o_gelu = mlp_io(block, inputs)
    if targets is not None:
        o_gelu = np.asarray(targets)
    before = range_stats(hidden_activations(block, x_mlp))
    swap_activation(block)
    params = mlp_params(block)
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 7])
    fixed = None if cfg.per_batch_threshold else positive_quantile(hidden_activations(block, x_mlp), cfg.quantile_p)
    n = len(x_mlp)
    curve = []
    try:
        for it in range(cfg.max_iterations):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            curve.append(distill_step(block, x_mlp[idx], o_gelu[idx], H, cfg, opt, fixed))
    finally:
        for p in params:
            p.requires_grad = False
    after = range_stats(hidden_activations(block, x_mlp))
    log.info("mlp reconstruction: q0.99 %.4f -> %.4f", before["q0.99"], after["q0.99"])
    return block, {"loss_curve": curve, "range_before": before, "range_after": after}
