"""Block-by-block post-training quantization of a ViT.

For every block, in forward order:

1. Hessian weights for the block output are estimated through the
   full-precision tail of the original model.
2. Optionally the MLP is rebuilt with ReLU (see :mod:`vitptq.mlp_recon`).
3. Weight rounding (AdaRound) and activation scales are optimized so the
   quantized block, fed with outputs of the already-quantized predecessors,
   reproduces the full-precision block outputs under the selected loss.
   Activations are randomly dropped back to full precision while training.
4. Rounding is hardened and the quantized outputs feed the next block.
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ops
from .autograd import Tape, Tensor, no_grad
from .hessian import (HessianDiagonal, PerturbationConfig, aph_loss, average_hessian, bh_loss,
                      estimate_per_sample_hessians, mse_loss, ph_loss, teacher_gradients)
from .mlp_recon import MlpReconConfig, reconstruct_mlp
from .optim import Adam
from .quant import (PER_CHANNEL, PER_TENSOR, ActQuantizer, AdaRoundState, DropConfig, QuantParams,
                    adaround_weight, calibrate_quant_params, fake_quantize, hardened_weight,
                    qdrop_activation)
from .vit import ACT_POINTS, LINEARS, capture_block_records

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "bh", "ph", "aph")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconstructionConfig:
    weight_bits: int = 3
    activation_bits: int = 3
    batch_size: int = 32
    lr_activation_scale: float = 4e-5
    lr_weight_rounding: float = 1e-3
    max_iterations: int = 2000
    loss_kind: str = "aph"
    calibration_size: int = 1024
    seed: int = 0
    act_clip_quantile: float = 0.999
    act_range_search: int = 11
    drop_probability: float = 0.5
    round_reg_weight: float = 0.01
    beta_start: float = 18.0
    beta_end: float = 2.0
    warmup: float = 0.2
    embed_bits: int = 8
    head_bits: int = 8
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        for name in ("weight_bits", "activation_bits", "embed_bits", "head_bits"):
            if not 2 <= getattr(self, name) <= 8:
                raise ValueError(f"{name} must be in [2, 8]")
        if self.batch_size < 1 or self.max_iterations < 0 or self.calibration_size < 1:
            raise ValueError("batch_size and calibration_size must be >= 1, max_iterations >= 0")
        if self.act_range_search < 0:
            raise ValueError("act_range_search must be >= 0 (0 or 1 disables the search)")
        if not 0.5 < self.act_clip_quantile <= 1.0:
            raise ValueError("act_clip_quantile must be in (0.5, 1]")
        DropConfig(self.drop_probability)

    def digest(self):
        return config_hash(asdict(self))


def config_hash(obj):
    """Short SHA-256 of a JSON-serializable object (sorted keys)."""
    blob = json.dumps(obj, sort_keys=True, default=_json_default).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _json_default(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


# -- per-block quantization context ----------------------------------------

class BlockQuantizer:
    """Weight and activation quantizers of one block, used as the block's ``ctx``.

    Before :meth:`harden` weights go through soft AdaRound; afterwards the
    soft state is dropped and fixed quantized weights are used.
    """

    def __init__(self, block, cfg):
        self.weights = {}
        self.rounding = {}
        for name in LINEARS:
            w = block.linear(name).weight
            q = calibrate_quant_params(w.data, cfg.weight_bits, PER_CHANNEL)
            self.weights[name] = q
            self.rounding[name] = AdaRoundState.init(
                w, q, reg_weight=cfg.round_reg_weight, beta_start=cfg.beta_start,
                beta_end=cfg.beta_end, warmup=cfg.warmup)
        self.acts = {}
        self.round_up = None
        self._hard = {}
        self.drop = None
        self.rng = None

    @classmethod
    def hardened(cls, weights, acts, round_up, block):
        self = cls.__new__(cls)
        self.weights, self.acts, self.rounding = weights, acts, None
        self.drop = self.rng = None
        self._set_hard(round_up, block)
        return self

    def _set_hard(self, round_up, block):
        self.round_up = {k: np.asarray(v, dtype=np.float32) for k, v in round_up.items()}
        self._hard = {k: Tensor._wrap(hardened_weight(block.linear(k).weight, self.weights[k], r))
                      for k, r in self.round_up.items()}

    def weight(self, name, W):
        if self.round_up is not None:
            return self._hard[name]
        return adaround_weight(W, self.weights[name], self.rounding[name])

    def act(self, point, x):
        aq = self.acts.get(point)
        if aq is None:
            return x
        xq = aq(x)
        if self.drop is not None:
            return qdrop_activation(x, xq, self.drop, self.rng)
        return xq

    def calibrate_activations(self, block, inputs, bits, clip_quantile, search_steps=0, batch_size=256):
        """Fit per-tensor activation quantizers from full-precision activations at every point."""
        rec = _Recorder()
        with no_grad():
            for j in range(0, len(inputs), batch_size):
                block.forward(Tensor._wrap(np.asarray(inputs[j:j + batch_size])), rec)
        self.acts = {}
        for point in ACT_POINTS:
            vals = np.concatenate([v.reshape(-1) for v in rec.values[point]])
            q = calibrate_quant_params(vals, bits, PER_TENSOR, clip_quantile=clip_quantile,
                                       search_steps=search_steps)
            self.acts[point] = ActQuantizer(q)

    def trainable(self):
        return ([s.v for s in self.rounding.values()], [a.log_scale for a in self.acts.values()])

    def regularizer(self, it, total):
        terms = [r for r in (s.regularizer(it, total) for s in self.rounding.values()) if r is not None]
        if not terms:
            return None
        out = terms[0]
        for t in terms[1:]:
            out = ops.add(out, t)
        return out

    def harden(self, block):
        self._set_hard({k: s.hard_decisions() for k, s in self.rounding.items()}, block)
        self.rounding = None
        self.drop = self.rng = None
        # canonical form: log_scale == log(params.scale), exactly what a reload produces
        self.acts = {name: fixed_act_quantizer(aq.current()) for name, aq in self.acts.items()}

    def has_soft_state(self):
        return self.rounding is not None

    def to_dict(self):
        return {"weights": {k: q.to_dict() for k, q in self.weights.items()},
                "acts": {k: a.current().to_dict() for k, a in self.acts.items()}}


def fixed_act_quantizer(q):
    return ActQuantizer(q, Tensor(np.log(q.scale), dtype=np.float64))


class _Recorder:
    def __init__(self):
        self.values = {p: [] for p in ACT_POINTS}

    def weight(self, name, W):
        return W

    def act(self, point, x):
        self.values[point].append(np.asarray(x.data))
        return x


def run_quantized_block(block, ctx, x, batch_size=256):
    with no_grad():
        return np.concatenate([block.forward(Tensor._wrap(np.asarray(x[j:j + batch_size])), ctx).data
                               for j in range(0, len(x), batch_size)])


# -- losses -----------------------------------------------------------------

@dataclass
class LossWeights:
    """Whatever a loss kind needs besides (output, target); rows align with calibration samples."""

    average: HessianDiagonal = None
    per_sample: np.ndarray = None
    grads: np.ndarray = None


def block_loss(kind, weights, out, target, idx):
    if kind == "mse":
        return mse_loss(out, target)
    if kind == "aph":
        return aph_loss(out, target, weights.average)
    if kind == "ph":
        return ph_loss(out, target, np.maximum(weights.per_sample[idx], 0.0))
    return bh_loss(out, target, weights.grads[idx])


def full_loss(kind, weights, out, target, batch_size=256):
    """Loss over the whole calibration set (same reduction as per-batch losses)."""
    n = len(out)
    total = 0.0
    for j in range(0, n, batch_size):
        idx = np.arange(j, min(j + batch_size, n))
        o = Tensor._wrap(np.asarray(out[idx], dtype=np.float64))
        total += float(block_loss(kind, weights, o, target[idx], idx).data) * len(idx)
    return total / n


def compute_block_hessians(model64, block_index, outputs, hcfg=PerturbationConfig()):
    """(per-sample diagonals, averaged diagonal) of one block's outputs."""
    per = estimate_per_sample_hessians(model64, block_index, outputs, hcfg)
    return per, average_hessian(per)


def compute_block_aph(model, block_index, records, cfg=PerturbationConfig()):
    """Averaged perturbation Hessian diagonal through the full-precision tail."""
    model64 = model if model.dtype == np.float64 else model.copy(np.float64)
    return compute_block_hessians(model64, block_index, records[block_index].outputs, cfg)[1]


def loss_weights_for(kind, model64, block_index, outputs, hcfg, need_average=False):
    w = LossWeights()
    if kind in ("ph", "aph") or need_average:
        w.per_sample, w.average = compute_block_hessians(model64, block_index, outputs, hcfg)
        if kind != "ph":
            w.per_sample = None
    if kind == "bh":
        w.grads = teacher_gradients(model64, block_index, outputs)
    return w


# -- block reconstruction ---------------------------------------------------

def reconstruct_block(block, inputs, targets, cfg, weights=None, block_index=0):
    """Optimize rounding and activation scales of ``block``; returns (BlockQuantizer, report).

    ``inputs`` are the quantized predecessors' outputs, ``targets`` the
    full-precision block outputs, both (N, T, D).
    """
    weights = weights or LossWeights()
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    n = len(inputs)
    bq = BlockQuantizer(block, cfg)
    bq.calibrate_activations(block, inputs, cfg.activation_bits, cfg.act_clip_quantile, cfg.act_range_search)
    frozen_acts = {k: fixed_act_quantizer(a.params) for k, a in bq.acts.items()}
    baseline = BlockQuantizer.hardened(bq.weights, frozen_acts,
                                       {k: s.hard_decisions() for k, s in bq.rounding.items()}, block)
    baseline_loss = full_loss(cfg.loss_kind, weights, run_quantized_block(block, baseline, inputs), targets)

    vs, scales = bq.trainable()
    opt_w = Adam(vs, lr=cfg.lr_weight_rounding)
    opt_a = Adam(scales, lr=cfg.lr_activation_scale)
    batch_rng = np.random.default_rng([cfg.seed, block_index, 1])
    bq.drop = DropConfig(cfg.drop_probability)
    bq.rng = np.random.default_rng([cfg.seed, block_index, 2])
    total = cfg.max_iterations
    curve = []
    window = max(5, min(50, total // 10))  # single-batch windows are too noisy to judge divergence
    for it in range(total):
        idx = np.sort(batch_rng.choice(n, size=min(cfg.batch_size, n), replace=False))
        with Tape() as tape:
            out = block.forward(Tensor._wrap(inputs[idx]), bq)
            rec = block_loss(cfg.loss_kind, weights, out, targets[idx], idx)
            reg = bq.regularizer(it, total)
            loss = rec if reg is None else ops.add(rec, reg)
        value = float(rec.data)
        if not np.isfinite(value) or not np.isfinite(float(loss.data)):
            raise DivergenceError(f"block {block_index}: non-finite loss at iteration {it}")
        curve.append(value)
        if it >= 2 * window:
            start = float(np.mean(curve[:window]))
            recent = float(np.mean(curve[-window:]))
            if recent > cfg.divergence_factor * max(start, 1e-30):
                raise DivergenceError(
                    f"block {block_index}: loss {recent:.4g} exceeds {cfg.divergence_factor}x the "
                    f"initial {start:.4g} at iteration {it} (lr_w={cfg.lr_weight_rounding}, "
                    f"lr_a={cfg.lr_activation_scale}, loss={cfg.loss_kind})")
        grads = tape.backward(loss)
        opt_w.step(grads)
        opt_a.step(grads)
    if total == 0:
        bq = baseline
    else:
        bq.harden(block)
    final_loss = full_loss(cfg.loss_kind, weights, run_quantized_block(block, bq, inputs), targets)
    log.info("block %d (%s): loss %.5g -> %.5g", block_index, cfg.loss_kind, baseline_loss, final_loss)
    return bq, {"block": block_index, "loss_curve": curve, "baseline_loss": baseline_loss,
                "final_loss": final_loss}


# -- whole model ------------------------------------------------------------

def _nearest(weight, bits):
    q = calibrate_quant_params(weight.data, bits, PER_CHANNEL)
    return q, Tensor._wrap(fake_quantize(weight.data, q))


class QuantizedModel:
    """A ViT with hardened weight rounding and fixed activation quantizers.

    ``base`` holds the full-precision weights (post-MLP-rebuild when enabled);
    quantized weights are derived from them and the stored rounding bits.
    """

    def __init__(self, base, blocks, embed_q, head_q, config, provenance=None):
        if len(blocks) != base.depth:
            raise ValueError("one block quantizer per block required")
        self.base = base
        self.blocks = list(blocks)
        self.embed_q = embed_q
        self.head_q = head_q
        self.config = config
        self.provenance = dict(provenance or {})
        self._embed_w = Tensor._wrap(fake_quantize(base.patch_embed.weight.data, embed_q))
        self._head_w = Tensor._wrap(fake_quantize(base.head.weight.data, head_q))

    def forward(self, images):
        x = self.base.embed(images, self._embed_w)
        for blk, bq in zip(self.base.blocks, self.blocks):
            x = blk(x, bq)
        return self.base.head_logits(x, self._head_w)

    __call__ = forward

    def has_soft_state(self):
        return any(bq.has_soft_state() for bq in self.blocks)

    def quant_manifest(self):
        return {"config": asdict(self.config), "embed": self.embed_q.to_dict(), "head": self.head_q.to_dict(),
                "blocks": [bq.to_dict() for bq in self.blocks]}

    def extra_tensors(self):
        out = {}
        for i, bq in enumerate(self.blocks):
            for name in LINEARS:
                out[f"quant.blocks.{i}.{name}.round_up"] = bq.round_up[name]
        return out

    @classmethod
    def from_manifest(cls, base, manifest, tensors):
        qm = manifest["quant"]
        blocks = []
        for i, (blk, rec) in enumerate(zip(base.blocks, qm["blocks"])):
            weights = {k: QuantParams.from_dict(d) for k, d in rec["weights"].items()}
            acts = {k: fixed_act_quantizer(QuantParams.from_dict(d)) for k, d in rec["acts"].items()}
            round_up = {k: tensors[f"quant.blocks.{i}.{k}.round_up"] for k in LINEARS}
            blocks.append(BlockQuantizer.hardened(weights, acts, round_up, blk))
        return cls(base, blocks, QuantParams.from_dict(qm["embed"]), QuantParams.from_dict(qm["head"]),
                   ReconstructionConfig(**qm["config"]), manifest.get("provenance"))


def _batches(images, size=256):
    return [images[j:j + size] for j in range(0, len(images), size)]


def quantize_model(model, calibration, cfg=ReconstructionConfig(), enable_mr=False,
                   mr_cfg=None, hcfg=None):
    """Quantize every block in forward order; returns (QuantizedModel, report, timings).

    ``calibration`` is an image array (N, C, H, W). ``model`` is not modified.
    """
    calibration = np.asarray(calibration)
    if len(calibration) == 0:
        raise ValueError("calibration set is empty")
    mr_cfg = mr_cfg or MlpReconConfig(seed=cfg.seed)
    hcfg = hcfg or PerturbationConfig(seed=cfg.seed)
    t0 = time.perf_counter()
    timings = {}
    records = capture_block_records(model, _batches(calibration))
    model64 = model.copy(np.float64)
    base = model.copy()
    embed_q, embed_w = _nearest(base.patch_embed.weight, cfg.embed_bits)
    head_q, _ = _nearest(base.head.weight, cfg.head_bits)
    with no_grad():
        x = np.concatenate([base.embed(b, embed_w).data for b in _batches(calibration)])
    blocks, block_reports = [], []
    for b, blk in enumerate(base.blocks):
        tb = time.perf_counter()
        weights = loss_weights_for(cfg.loss_kind, model64, b, records[b].outputs, hcfg, need_average=enable_mr)
        rep = {}
        if enable_mr:
            _, mr = reconstruct_mlp(blk, records[b].inputs, weights.average, replace(mr_cfg, seed=mr_cfg.seed + b))
            rep["mlp_reconstruction"] = mr
        bq, qr = reconstruct_block(blk, x, records[b].outputs, cfg, weights, b)
        rep.update(qr)
        if weights.average is not None:
            rep["token_importance"] = weights.average.token_importance().tolist()
        x = run_quantized_block(blk, bq, x)
        blocks.append(bq)
        block_reports.append(rep)
        timings[f"block_{b}"] = time.perf_counter() - tb
    timings["total"] = time.perf_counter() - t0
    prov = {"config_hash": cfg.digest(), "seed": cfg.seed, "mlp_reconstruction": bool(enable_mr),
            "mlp_config_hash": config_hash(asdict(mr_cfg)), "hessian_config_hash": config_hash(asdict(hcfg))}
    qmodel = QuantizedModel(base, blocks, embed_q, head_q, cfg, prov)
    report = {"config": asdict(cfg), "mlp_config": asdict(mr_cfg), "hessian_config": asdict(hcfg),
              "enable_mr": bool(enable_mr), "config_hash": prov["config_hash"], "seed": cfg.seed,
              "blocks": block_reports}
    return qmodel, report, timings


def predict(model, images, batch_size=256):
    images = np.asarray(images)
    with no_grad():
        return np.concatenate([model(images[j:j + batch_size]).data for j in range(0, len(images), batch_size)])


def accuracy_from_logits(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("evaluation set is empty")
    if len(logits) != len(labels):
        raise ValueError("logits and labels disagree in length")
    return float((logits.argmax(axis=-1) == labels).mean())


def evaluate(model, eval_set, batch_size=256):
    """Top-1 accuracy of a ViT or QuantizedModel on (images, labels)."""
    images, labels = eval_set
    if len(labels) == 0:
        raise ValueError("evaluation set is empty")
    return accuracy_from_logits(predict(model, images, batch_size), labels)


# -- probes -----------------------------------------------------------------

@dataclass(frozen=True)
class VarianceProbeConfig:
    layer: str = "fc1"
    weight_bits: int = 3
    trials: int = 20
    minibatches: int = 32
    batch_size: int = 32
    curve_iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.layer not in LINEARS:
            raise ValueError(f"layer must be one of {LINEARS}")
        if self.trials < 1 or self.minibatches < 2 or self.batch_size < 1:
            raise ValueError("trials >= 1, minibatches >= 2 and batch_size >= 1 required")


class _ScaledNearest:
    """Nearest-rounding weights at fixed bits; one layer's scales multiplied by exp(theta)."""

    def __init__(self, block, bits, layer, theta):
        self.params = {n: calibrate_quant_params(block.linear(n).weight.data, bits, PER_CHANNEL) for n in LINEARS}
        self.layer = layer
        self.theta = theta
        self.fixed = {n: Tensor._wrap(fake_quantize(block.linear(n).weight.data, q))
                      for n, q in self.params.items() if n != layer}

    def weight(self, name, W):
        if name != self.layer:
            return self.fixed[name]
        q = self.params[name]
        scale = ops.mul(Tensor._wrap(q.scale.astype(W.dtype)), ops.exp(self.theta))
        qmin, qmax = q.qrange
        return ops.fake_quant(W, scale, q.zero_point, qmin, qmax, axis=0)

    def act(self, point, x):
        return x


def _theta_gradient(block, ctx, x, target, weight):
    with Tape() as tape:
        out = block.forward(Tensor._wrap(x), ctx)
        loss = ops.mul(ops.sum(ops.mul(ops.square(ops.sub(out, target)), weight.astype(out.dtype))),
                       1.0 / len(x))
    return float(tape.backward(loss).array(ctx.theta)[0])


def gradient_variance_probe(model, block_index, records, per_sample, cfg=VarianceProbeConfig(),
                            recon_cfg=None, clamp=True):
    """Mini-batch gradient variance of the PH and APH losses w.r.t. a weight-quantizer scale.

    ``per_sample`` are the block's per-sample Hessian diagonals (N, T, D).
    For every trial, ``minibatches`` batches are drawn; the gradient of each
    loss with respect to a global log-multiplier theta of ``cfg.layer``'s
    weight scales (at theta = 0) is computed on each batch. The report also
    holds PH and APH reconstruction loss curves of ``curve_iterations``
    iterations (set 0 to skip).
    """
    rec = records[block_index]
    per_sample = np.asarray(per_sample, dtype=np.float64)
    avg = per_sample.mean(axis=0)
    if clamp:
        per_w, avg_w = np.maximum(per_sample, 0.0), np.maximum(avg, 0.0)
    else:
        per_w, avg_w = per_sample, avg
    block = model.blocks[block_index]
    theta = Tensor(np.zeros(1), requires_grad=True)
    ctx = _ScaledNearest(block, cfg.weight_bits, cfg.layer, theta)
    n = len(rec)
    trials = []
    for t in range(cfg.trials):
        rng = np.random.default_rng([cfg.seed, block_index, t])
        g_ph, g_aph = [], []
        for _ in range(cfg.minibatches):
            idx = np.sort(rng.choice(n, size=min(cfg.batch_size, n), replace=False))
            x, o = rec.inputs[idx], rec.outputs[idx]
            g_ph.append(_theta_gradient(block, ctx, x, o, per_w[idx]))
            g_aph.append(_theta_gradient(block, ctx, x, o, np.broadcast_to(avg_w, o.shape)))
        trials.append({"trial": t, "grad_ph": g_ph, "grad_aph": g_aph,
                       "var_ph": float(np.var(g_ph, ddof=1)), "var_aph": float(np.var(g_aph, ddof=1))})
    wins = sum(tr["var_aph"] <= tr["var_ph"] for tr in trials)
    report = {"block": block_index, "layer": cfg.layer, "trials": trials, "aph_not_worse": wins,
              "aph_not_worse_fraction": wins / len(trials), "config": asdict(cfg)}
    if cfg.curve_iterations:
        base = replace(recon_cfg or ReconstructionConfig(seed=cfg.seed), max_iterations=cfg.curve_iterations)
        weights = LossWeights(average=HessianDiagonal(avg, n), per_sample=per_sample)
        curves = {}
        for kind in ("ph", "aph"):
            blk = model.copy().blocks[block_index]
            _, r = reconstruct_block(blk, rec.inputs, rec.outputs, replace(base, loss_kind=kind), weights, block_index)
            curves[kind] = r["loss_curve"]
        report["loss_curves"] = curves
        report["fluctuation"] = {k: curve_fluctuation(c) for k, c in curves.items()}
    return report


def curve_fluctuation(curve):
    """Mean absolute difference between consecutive loss values."""
    c = np.asarray(curve, dtype=np.float64)
    return float(np.abs(np.diff(c)).mean()) if len(c) > 1 else 0.0


def stochastic_round_weights(block, bits, rng):
    """Nearest-grid weights with each entry rounded up with probability equal to its fractional part."""
    out = {}
    for name in LINEARS:
        w = block.linear(name).weight
        q = calibrate_quant_params(w.data, bits, PER_CHANNEL)
        s = q.scale.reshape(-1, 1)
        frac = w.data / s - np.floor(w.data / s)
        out[name] = Tensor._wrap(hardened_weight(w, q, (rng.random(w.shape) < frac).astype(np.float64)))
    return out


class _FixedWeights:
    def __init__(self, weights):
        self.weights = weights

    def weight(self, name, W):
        return self.weights[name]

    def act(self, point, x):
        return x


def expectation_consistency_probe(model, block_index, records, per_sample, draws=200, bits=3, seed=0):
    """Paired APH and PH loss values over random (sample, stochastic rounding) draws.

    Raw (unclamped) Hessian diagonals are used on both sides.
    """
    rec = records[block_index]
    per_sample = np.asarray(per_sample, dtype=np.float64)
    avg = per_sample.mean(axis=0)
    block = model.blocks[block_index]
    rng = np.random.default_rng([seed, block_index])
    l_aph, l_ph = [], []
    for _ in range(draws):
        k = int(rng.integers(len(rec)))
        ctx = _FixedWeights(stochastic_round_weights(block, bits, rng))
        with no_grad():
            out = block.forward(Tensor._wrap(rec.inputs[k:k + 1]), ctx).data[0].astype(np.float64)
        err2 = np.square(out - rec.outputs[k])
        l_aph.append(float((err2 * avg).sum()))
        l_ph.append(float((err2 * per_sample[k]).sum()))
    l_aph, l_ph = np.array(l_aph), np.array(l_ph)
    se = float(np.sqrt(l_aph.var(ddof=1) / draws + l_ph.var(ddof=1) / draws))
    return {"aph": l_aph.tolist(), "ph": l_ph.tolist(), "mean_aph": float(l_aph.mean()),
            "mean_ph": float(l_ph.mean()), "pooled_se": se,
            "z": float(abs(l_aph.mean() - l_ph.mean()) / se) if se > 0 else 0.0}
