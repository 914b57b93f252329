"""Library entry points behind the CLI subcommands.

Each function takes a loaded model plus arrays and returns plain rows or
dicts; the CLI only parses flags, loads inputs and writes files.
"""

from dataclasses import replace

import numpy as np

from .autograd import Tensor, no_grad
from .hessian import PerturbationConfig
from .mlp_recon import MlpReconConfig, reconstruct_mlp
from .pipeline import (LOSS_KINDS, ReconstructionConfig, VarianceProbeConfig, _Recorder, _batches,
                       compute_block_hessians, evaluate, gradient_variance_probe, quantize_model)
from .vit import ACT_POINTS, capture_block_records

RANGE_QUANTILES = (0.001, 0.01, 0.99, 0.999)
RANGE_HEADER = ("stage", "block", "point", "activation", "min", "q0.001", "q0.01", "q0.99", "q0.999", "max")
COMPARE_HEADER = ("loss", "mlp_reconstruction", "weight_bits", "activation_bits", "iterations", "accuracy",
                  "fp_accuracy")
TOKEN_HEADER = ("block", "token", "importance")
CHANNEL_HEADER = ("block", "channel", "importance")


def compare_losses(model, calibration, eval_set, cfg=ReconstructionConfig(), mr_modes=(False,),
                   losses=LOSS_KINDS, mr_cfg=None, hcfg=None):
    """Quantize once per (loss, MLP-rebuild) pair; returns CSV rows in that order."""
    fp = evaluate(model, eval_set)
    rows = []
    for mr in mr_modes:
        for kind in losses:
            run = replace(cfg, loss_kind=kind)
            qm, _, _ = quantize_model(model, calibration, run, enable_mr=mr, mr_cfg=mr_cfg, hcfg=hcfg)
            rows.append((kind, int(mr), cfg.weight_bits, cfg.activation_bits, cfg.max_iterations,
                         evaluate(qm, eval_set), fp))
    return rows


def hessian_importance(model, calibration, blocks=None, hcfg=None):
    """(token rows, channel rows) of the averaged Hessian diagonal per block."""
    hcfg = hcfg or PerturbationConfig()
    records = capture_block_records(model, _batches(np.asarray(calibration)))
    model64 = model.copy(np.float64)
    tokens, channels = [], []
    for b in (range(model.depth) if blocks is None else blocks):
        _, avg = compute_block_hessians(model64, b, records[b].outputs, hcfg)
        tokens += [(b, t, v) for t, v in enumerate(avg.token_importance())]
        channels += [(b, c, v) for c, v in enumerate(avg.channel_importance())]
    return tokens, channels


def _range_row(stage, block, point, kind, values):
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    qs = np.quantile(v, RANGE_QUANTILES)
    return (stage, block, point, kind, float(v.min()), *map(float, qs), float(v.max()))


def block_activation_ranges(block, inputs, stage, block_index, batch_size=256):
    rec = _Recorder()
    with no_grad():
        for j in range(0, len(inputs), batch_size):
            block.forward(Tensor._wrap(np.asarray(inputs[j:j + batch_size])), rec)
    return [_range_row(stage, block_index, p, block.activation, np.concatenate([a.reshape(-1) for a in rec.values[p]]))
            for p in ACT_POINTS]


def activation_ranges(model, calibration, mlp_recon=False, mr_cfg=None, hcfg=None):
    """Quantile ranges at every quantization point of every block.

    With ``mlp_recon`` each block's MLP is also rebuilt (on a copy) and the
    ranges after the rebuild are appended with stage ``"after_mr"``.
    """
    records = capture_block_records(model, _batches(np.asarray(calibration)))
    rows = []
    for b, blk in enumerate(model.blocks):
        rows += block_activation_ranges(blk, records[b].inputs, "full_precision", b)
    if mlp_recon:
        mr_cfg = mr_cfg or MlpReconConfig()
        hcfg = hcfg or PerturbationConfig()
        work = model.copy()
        model64 = model.copy(np.float64)
        for b, blk in enumerate(work.blocks):
            _, avg = compute_block_hessians(model64, b, records[b].outputs, hcfg)
            reconstruct_mlp(blk, records[b].inputs, avg, replace(mr_cfg, seed=mr_cfg.seed + b))
            rows += block_activation_ranges(blk, records[b].inputs, "after_mr", b)
    return rows


def probe_variance(model, calibration, block_index=0, cfg=VarianceProbeConfig(), hcfg=None, recon_cfg=None):
    hcfg = hcfg or PerturbationConfig()
    records = capture_block_records(model, _batches(np.asarray(calibration)))
    per, _ = compute_block_hessians(model.copy(np.float64), block_index, records[block_index].outputs, hcfg)
    return gradient_variance_probe(model, block_index, records, per, cfg, recon_cfg=recon_cfg)
