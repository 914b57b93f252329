"""End-to-end acceptance checks on the bundled fixture model.

Each test records one PASS/FAIL line that is printed in the terminal summary.
"""

import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from vitptq.cli import main
from vitptq.hessian import SQUARED_ERROR, PerturbationConfig, estimate_per_sample_hessians, tail_jacobian
from vitptq.mlp_recon import MlpReconConfig, reconstruct_mlp
from vitptq.pipeline import (ReconstructionConfig, VarianceProbeConfig, compute_block_hessians, evaluate,
                             expectation_consistency_probe, gradient_variance_probe, quantize_model)
from oracles import IdentityTail

TESTS = Path(__file__).parent
TIE = 0.01

pytestmark = pytest.mark.acceptance


@pytest.fixture
def criterion(request):
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])
    state = {}

    def record(number, ok, detail):
        state["n"] = number
        lines.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"))
        return ok

    yield record
    if "n" not in state:
        lines.append((99, f"{request.node.name}: FAIL (raised before recording)"))


@pytest.fixture(scope="module")
def block0_per_sample(fixture_model, fixture_records):
    per, _ = compute_block_hessians(fixture_model.copy(np.float64), 0, fixture_records[0].outputs,
                                    PerturbationConfig())
    return per


def test_1_hessian_oracles(criterion, rng):
    t0 = time.time()
    cfg = PerturbationConfig(loss_kind=SQUARED_ERROR, direction="ones")
    o = rng.normal(size=(64, 17, 10))
    quad = estimate_per_sample_hessians(IdentityTail(), 0, o, cfg)
    quad_err = float(np.abs(quad - 2.0).max())
    kl = estimate_per_sample_hessians(IdentityTail(), 0, np.zeros((64, 10)), PerturbationConfig(direction="coordinate"))
    kl_rel = float(np.abs(kl / 0.09 - 1.0).max())
    elapsed = time.time() - t0
    ok = cfg.delta == 1e-6 and quad_err <= 1e-4 and kl_rel <= 0.01 and elapsed < 60
    criterion(1, ok, f"quadratic max err {quad_err:.2e} (<=1e-4), KL max rel err {kl_rel:.2e} (<=1e-2), "
                     f"{elapsed:.1f}s")
    assert ok


def test_2_jacobian_at_equality(criterion, fixture_model, fixture_records):
    t0 = time.time()
    m = fixture_model.copy(np.float64)
    worst = max(float(np.abs(tail_jacobian(m, b, r.outputs[:64], r.outputs[:64])).max())
                for b, r in enumerate(fixture_records))
    elapsed = time.time() - t0
    ok = worst <= 1e-7
    criterion(2, ok, f"max |J(O,O)| over blocks {worst:.2e} (<=1e-7), {elapsed:.1f}s")
    assert ok


def test_3_expectation_consistency(criterion, fixture_model, fixture_records, block0_per_sample):
    t0 = time.time()
    rep = expectation_consistency_probe(fixture_model, 0, fixture_records, block0_per_sample, draws=400)
    elapsed = time.time() - t0
    ok = rep["z"] <= 3.0 and elapsed < 300
    criterion(3, ok, f"mean APH {rep['mean_aph']:.4g} vs PH {rep['mean_ph']:.4g}, "
                     f"|diff|/pooled SE {rep['z']:.2f} (<=3) over 400 draws, {elapsed:.1f}s")
    assert ok


def test_4_variance_reduction(criterion, fixture_model, fixture_records, block0_per_sample):
    t0 = time.time()
    rep = gradient_variance_probe(fixture_model, 0, fixture_records, block0_per_sample, VarianceProbeConfig())
    elapsed = time.time() - t0
    fl = rep["fluctuation"]
    frac = rep["aph_not_worse_fraction"]
    ok = frac >= 0.95 and fl["aph"] <= fl["ph"] and elapsed < 600
    criterion(4, ok, f"APH variance <= PH in {rep['aph_not_worse']}/20 trials (>=95%), curve fluctuation "
                     f"APH {fl['aph']:.4g} vs PH {fl['ph']:.4g}, {elapsed:.1f}s")
    assert ok


def test_5_mlp_reconstruction_ranges(criterion, fixture_model, fixture_records, eval_set):
    t0 = time.time()
    model = fixture_model.copy()
    model64 = fixture_model.copy(np.float64)
    cfg = MlpReconConfig()
    q = []
    for b, blk in enumerate(model.blocks):
        _, avg = compute_block_hessians(model64, b, fixture_records[b].outputs, PerturbationConfig())
        _, rep = reconstruct_mlp(blk, fixture_records[b].inputs, avg, replace(cfg, seed=cfg.seed + b))
        q.append((rep["range_before"]["q0.99"], rep["range_after"]["q0.99"]))
    fp, mr = evaluate(fixture_model, eval_set), evaluate(model, eval_set)
    elapsed = time.time() - t0
    shrunk = all(a < b for b, a in q)
    ok = shrunk and fp - mr <= 0.02 and elapsed < 900
    ranges = ", ".join(f"b{i} {b:.3f}->{a:.3f}" for i, (b, a) in enumerate(q))
    criterion(5, ok, f"fc2-input q0.99 {ranges} (all must shrink); accuracy FP {fp:.4f} MR {mr:.4f} "
                     f"(drop <=0.02), {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def ablation(fixture_model, calibration_images, eval_set):
    t0 = time.time()
    acc = {"fp": evaluate(fixture_model, eval_set)}
    for bits in (3, 8):
        cfg = ReconstructionConfig(weight_bits=bits, activation_bits=bits, max_iterations=2000)
        for kind, mr in (("mse", False), ("aph", False), ("aph", True)):
            q, _, _ = quantize_model(fixture_model, calibration_images, replace(cfg, loss_kind=kind), enable_mr=mr)
            acc[bits, kind, mr] = evaluate(q, eval_set)
    return acc, time.time() - t0


def _not_worse(a, b):
    """Verdict for a >= b: a win needs a 1-point margin, a gap under 1 point is a tie."""
    if a - b >= TIE:
        return True, "win"
    if abs(a - b) <= TIE:
        return True, "tie"
    return False, "loss"


def test_6_ablation_ordering(criterion, ablation):
    acc, elapsed = ablation
    fp = acc["fp"]
    mse, aph, aph_mr = acc[3, "mse", False], acc[3, "aph", False], acc[3, "aph", True]
    ok1, v1 = _not_worse(aph_mr, aph)
    ok2, v2 = _not_worse(aph, mse)
    w8 = {k: acc[(8,) + k] for k in (("mse", False), ("aph", False), ("aph", True))}
    ok8 = all(abs(fp - v) <= TIE for v in w8.values())
    ok = ok1 and ok2 and ok8 and elapsed < 3600
    w8s = ", ".join(f"{k}{'+mr' if m else ''} {v:.4f}" for (k, m), v in w8.items())
    criterion(6, ok, f"W3/A3 APH+MR {aph_mr:.4f} vs APH {aph:.4f} ({v1}), APH vs MSE {mse:.4f} ({v2}); "
                     f"W8/A8 {w8s} vs FP {fp:.4f} (within 0.01), {elapsed:.0f}s")
    assert ok


def test_7_quantizer_properties(criterion):
    t0 = time.time()
    names = ["test_fake_quantize_idempotent", "test_in_range_error_within_half_scale",
             "test_at_most_two_pow_bits_values", "test_adaround_soft_init_identity"]
    ids = [f"{TESTS / 'test_quant.py'}::{n}" for n in names]
    r = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                       capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.time() - t0
    ok = r.returncode == 0 and f"{len(names)} passed" in r.stdout and elapsed < 60
    criterion(7, ok, f"{len(names)} property suites x 1000 cases: {r.stdout.strip().splitlines()[-1]}, "
                     f"{elapsed:.1f}s")
    assert ok, r.stdout[-2000:]


def test_8_cli_determinism(criterion, tmp_path):
    t0 = time.time()
    assert main(["gen-data", "--out", str(tmp_path / "calib"), "--n", "1024", "--seed", "300"]) == 0
    outs = []
    for k in range(2):
        ck, rep = tmp_path / f"q{k}.ckpt", tmp_path / f"r{k}.json"
        assert main(["quantize", "--calib", str(tmp_path / "calib"), "--out", str(ck), "--report", str(rep),
                     "--seed", "0"]) == 0
        outs.append((ck.read_bytes(), rep.read_bytes()))
    elapsed = time.time() - t0
    same_ck, same_rep = outs[0][0] == outs[1][0], outs[0][1] == outs[1][1]
    ok = same_ck and same_rep
    criterion(8, ok, f"checkpoint identical {same_ck}, report identical {same_rep} "
                     f"({len(outs[0][0])} bytes), {elapsed:.0f}s")
    assert ok


def test_9_gradient_correctness(criterion):
    t0 = time.time()
    r = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                        str(TESTS / "test_autograd.py"), "-k", "central_differences or straight_through"],
                       capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.time() - t0
    ok = r.returncode == 0 and elapsed < 120
    criterion(9, ok, f"100 instances per primitive at rtol 1e-3: {r.stdout.strip().splitlines()[-1]}, "
                     f"{elapsed:.1f}s")
    assert ok, r.stdout[-2000:]
