from dataclasses import replace

import numpy as np
import pytest

from vitptq.hessian import SQUARED_ERROR, HessianDiagonal, PerturbationConfig
from vitptq.pipeline import (DivergenceError, LossWeights, QuantizedModel, ReconstructionConfig,
                             VarianceProbeConfig, accuracy_from_logits, compute_block_aph, config_hash,
                             curve_fluctuation, evaluate, expectation_consistency_probe,
                             gradient_variance_probe, quantize_model, reconstruct_block, run_quantized_block)
from vitptq.vit import RELU, BlockRecord, capture_block_records
from oracles import IdentityTail

FAST = ReconstructionConfig(max_iterations=20, batch_size=8, calibration_size=32)


@pytest.fixture
def tiny_calib(rng):
    return rng.normal(size=(32, 3, 8, 8)).astype(np.float32)


class TestConfig:
    def test_defaults(self):
        c = ReconstructionConfig()
        assert (c.batch_size, c.lr_activation_scale, c.lr_weight_rounding, c.calibration_size) == (32, 4e-5, 1e-3, 1024)
        assert c.max_iterations == 2000 and c.loss_kind == "aph"
        assert c.drop_probability == 0.5

    @pytest.mark.parametrize("kw", [dict(loss_kind="l1"), dict(weight_bits=1), dict(batch_size=0),
                                    dict(drop_probability=2.0), dict(max_iterations=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ReconstructionConfig(**kw)

    def test_hash_stable_and_sensitive(self):
        assert ReconstructionConfig().digest() == ReconstructionConfig().digest()
        assert ReconstructionConfig().digest() != ReconstructionConfig(seed=1).digest()
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


class TestBlockAPH:
    def test_identity_tail_squared_loss(self, rng):
        recs = [BlockRecord(0, rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))]
        h = compute_block_aph(IdentityTail(), 0, recs, PerturbationConfig(loss_kind=SQUARED_ERROR))
        np.testing.assert_allclose(h.values, 2.0, atol=1e-4)
        assert h.sample_count == 6

    def test_fixture_shape_and_class_token_dominance(self, fixture_model, fixture_records):
        recs = [BlockRecord(r.block_index, r.inputs[:256], r.outputs[:256]) for r in fixture_records]
        for b in range(fixture_model.depth):
            h = compute_block_aph(fixture_model, b, recs)
            assert h.shape == (17, 64)
            tok = h.token_importance()
            assert tok[0] > tok[1:].mean()


class TestReconstructBlock:
    def test_loss_decreases(self, fixture_model, fixture_records):
        rec = fixture_records[0]
        blk = fixture_model.copy().blocks[0]
        cfg = replace(ReconstructionConfig(), loss_kind="mse", max_iterations=120)
        bq, rep = reconstruct_block(blk, rec.inputs[:256], rec.outputs[:256], cfg)
        assert rep["final_loss"] < rep["baseline_loss"]
        assert not bq.has_soft_state()
        assert len(rep["loss_curve"]) == 120

    def test_eight_bit_close_to_full_precision(self, fixture_model, fixture_records):
        rec = fixture_records[1]
        blk = fixture_model.copy().blocks[1]
        cfg = ReconstructionConfig(weight_bits=8, activation_bits=8, loss_kind="mse", max_iterations=50)
        bq, _ = reconstruct_block(blk, rec.inputs[:256], rec.outputs[:256], cfg)
        out = run_quantized_block(blk, bq, rec.inputs[:256])
        ref = rec.outputs[:256]
        assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 0.01

    def test_zero_iterations_returns_baseline(self, fixture_model, fixture_records):
        rec = fixture_records[0]
        blk = fixture_model.copy().blocks[0]
        cfg = replace(ReconstructionConfig(), loss_kind="mse", max_iterations=0)
        bq, rep = reconstruct_block(blk, rec.inputs[:64], rec.outputs[:64], cfg)
        assert rep["final_loss"] == rep["baseline_loss"] and rep["loss_curve"] == []
        assert not bq.has_soft_state()

    def test_divergence_aborts_with_diagnostics(self, fixture_model, fixture_records):
        rec = fixture_records[0]
        blk = fixture_model.copy().blocks[0]
        cfg = ReconstructionConfig(loss_kind="mse", max_iterations=200, lr_activation_scale=0.5,
                                   lr_weight_rounding=0.0, divergence_factor=1.01, round_reg_weight=0.0)
        with pytest.raises(DivergenceError, match="exceeds"):
            reconstruct_block(blk, rec.inputs[:64], rec.outputs[:64], cfg)

    def test_equal_per_sample_hessians_collapse_ph_to_aph(self, fixture_model, fixture_records, rng):
        rec = fixture_records[0]
        x, o = rec.inputs[:48], rec.outputs[:48]
        h = rng.uniform(0.1, 2.0, size=(17, 64))
        w = LossWeights(average=HessianDiagonal(h, 48), per_sample=np.broadcast_to(h, o.shape).copy())
        curves = {}
        for kind in ("ph", "aph"):
            blk = fixture_model.copy().blocks[0]
            cfg = ReconstructionConfig(loss_kind=kind, max_iterations=15, batch_size=8)
            _, rep = reconstruct_block(blk, x, o, cfg, w)
            curves[kind] = rep["loss_curve"]
        assert curves["ph"] == curves["aph"]


class TestQuantizeModel:
    def test_mr_switches_every_block_to_relu(self, tiny_model, tiny_calib):
        from vitptq.mlp_recon import MlpReconConfig
        qm, rep, timings = quantize_model(tiny_model, tiny_calib, FAST, enable_mr=True,
                                          mr_cfg=MlpReconConfig(max_iterations=5))
        assert qm.base.activation_kinds() == [RELU, RELU]
        assert tiny_model.activation_kinds() == ["gelu", "gelu"]
        assert "mlp_reconstruction" in rep["blocks"][0]
        assert timings["total"] > 0

    def test_hardened_and_provenance(self, tiny_model, tiny_calib):
        qm, rep, _ = quantize_model(tiny_model, tiny_calib, replace(FAST, loss_kind="mse"))
        assert not qm.has_soft_state()
        assert qm.provenance["config_hash"] == replace(FAST, loss_kind="mse").digest()
        assert rep["seed"] == 0 and [b["block"] for b in rep["blocks"]] == [0, 1]
        for bq in qm.blocks:
            for r in bq.round_up.values():
                assert set(np.unique(r)) <= {0.0, 1.0}

    @pytest.mark.parametrize("kind", ["mse", "bh", "ph", "aph"])
    def test_deterministic(self, tiny_model, tiny_calib, kind):
        cfg = replace(FAST, loss_kind=kind)
        a, _, _ = quantize_model(tiny_model, tiny_calib, cfg)
        b, _, _ = quantize_model(tiny_model, tiny_calib, cfg)
        assert a.quant_manifest() == b.quant_manifest()
        for k, v in a.extra_tensors().items():
            assert v.tobytes() == b.extra_tensors()[k].tobytes()
        x = tiny_calib[:4]
        assert a(x).data.tobytes() == b(x).data.tobytes()

    def test_seed_changes_result(self, tiny_model, tiny_calib):
        a, _, _ = quantize_model(tiny_model, tiny_calib, FAST)
        b, _, _ = quantize_model(tiny_model, tiny_calib, replace(FAST, seed=1))
        assert a.quant_manifest() != b.quant_manifest()

    def test_empty_calibration(self, tiny_model):
        with pytest.raises(ValueError):
            quantize_model(tiny_model, np.zeros((0, 3, 8, 8)), FAST)

    def test_manifest_round_trip(self, tiny_model, tiny_calib):
        qm, _, _ = quantize_model(tiny_model, tiny_calib, FAST)
        again = QuantizedModel.from_manifest(qm.base, {"quant": qm.quant_manifest(), "provenance": qm.provenance},
                                             qm.extra_tensors())
        assert again(tiny_calib[:4]).data.tobytes() == qm(tiny_calib[:4]).data.tobytes()
        assert again.quant_manifest() == qm.quant_manifest()


class TestEvaluate:
    def test_perfect_logits(self):
        labels = np.array([0, 2, 1])
        assert accuracy_from_logits(np.eye(3)[labels], labels) == 1.0

    def test_random_logits_near_chance(self):
        r = np.random.default_rng(0)
        n = 5000
        acc = accuracy_from_logits(r.normal(size=(n, 10)), r.integers(0, 10, n))
        assert abs(acc - 0.1) <= 4 * np.sqrt(0.09 / n)

    def test_empty(self, tiny_model):
        with pytest.raises(ValueError):
            evaluate(tiny_model, (np.zeros((0, 3, 8, 8)), np.zeros(0, int)))

    def test_fixture_reference_accuracy(self, fixture_model, eval_set):
        assert evaluate(fixture_model, eval_set) == pytest.approx(0.986, abs=1e-9)


class TestProbes:
    def test_identical_hessians_equal_variances(self, fixture_model, fixture_records, rng):
        h = rng.uniform(0.1, 1.0, size=(17, 64))
        per = np.broadcast_to(h, fixture_records[0].outputs.shape)
        cfg = VarianceProbeConfig(trials=2, minibatches=4, batch_size=8, curve_iterations=6)
        rep = gradient_variance_probe(fixture_model, 0, fixture_records, per, cfg)
        for tr in rep["trials"]:
            assert tr["var_aph"] == pytest.approx(tr["var_ph"], rel=1e-6)
        assert set(rep["loss_curves"]) == {"ph", "aph"}
        assert len(rep["loss_curves"]["aph"]) == 6

    def test_fluctuation(self):
        assert curve_fluctuation([1.0, 3.0, 2.0]) == 1.5
        assert curve_fluctuation([4.0]) == 0.0

    def test_consistency_probe_report(self, fixture_model, fixture_records, rng):
        per = rng.uniform(0, 1, size=fixture_records[0].outputs.shape)
        rep = expectation_consistency_probe(fixture_model, 0, fixture_records, per, draws=10)
        assert len(rep["aph"]) == 10 and rep["pooled_se"] > 0

    def test_probe_config_validation(self):
        with pytest.raises(ValueError):
            VarianceProbeConfig(layer="head")
