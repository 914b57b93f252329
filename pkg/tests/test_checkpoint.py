import json
import struct

import numpy as np
import pytest

from vitptq.checkpoint import MAGIC, CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from vitptq.pipeline import ReconstructionConfig, quantize_model
from vitptq.vit import RELU


def test_float_round_trip_bitwise(tiny_model, tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, p)
    back = load_checkpoint(p)
    for name, t in tiny_model.named_parameters().items():
        assert back.named_parameters()[name].data.tobytes() == t.data.tobytes()
    assert back.config == tiny_model.config


def test_save_load_save_identical_bytes(tiny_model, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(tiny_model, a)
    save_checkpoint(load_checkpoint(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_activation_kinds_persist(tiny_model, tmp_path):
    tiny_model.blocks[1].activation = RELU
    save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    assert load_checkpoint(tmp_path / "m.ckpt").activation_kinds() == ["gelu", RELU]


def test_quantized_round_trip(tiny_model, rng, tmp_path):
    calib = rng.normal(size=(16, 3, 8, 8)).astype(np.float32)
    qm, _, _ = quantize_model(tiny_model, calib, ReconstructionConfig(max_iterations=10, batch_size=8))
    a, b = tmp_path / "q.ckpt", tmp_path / "q2.ckpt"
    save_checkpoint(qm, a)
    back = load_checkpoint(a)
    assert back(calib[:3]).data.tobytes() == qm(calib[:3]).data.tobytes()
    assert not back.has_soft_state()
    save_checkpoint(back, b)
    assert a.read_bytes() == b.read_bytes()
    assert back.provenance["config_hash"] == qm.provenance["config_hash"]


def test_manifest_offsets_within_payload(tiny_model, tmp_path):
    save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    manifest = json.loads(data[len(MAGIC) + 8:len(MAGIC) + 8 + n])
    spans = sorted((e["offset"], e["offset"] + e["length"]) for e in manifest["tensors"].values())
    assert spans[0][0] == 0
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert spans[-1][1] == len(data) - len(MAGIC) - 8 - n


def test_truncated_payload_detected(tiny_model, tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, p)
    data = p.read_bytes()
    with pytest.raises(CheckpointError, match="exceeds payload"):
        decode(data[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        decode(data[:len(MAGIC) + 4])


def test_version_mismatch(tiny_model):
    data = encode({"x": np.zeros(2, np.float32)}, {"config": {}})
    bad = data.replace(b'"format_version": 1', b'"format_version": 7')
    with pytest.raises(CheckpointError, match="unsupported checkpoint format version 7"):
        decode(bad)


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"PK\x03\x04")


def test_overlap_detected():
    data = encode({"a": np.zeros(2, np.float32), "b": np.zeros(2, np.float32)}, {})
    bad = data.replace(b'"offset": 8', b'"offset": 4')
    with pytest.raises(CheckpointError, match="overlapping"):
        decode(bad)


def test_missing_file_has_path_context(tmp_path):
    with pytest.raises(OSError, match="nope.ckpt"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_deterministic_bytes(tiny_model, tmp_path):
    save_checkpoint(tiny_model, tmp_path / "a.ckpt")
    save_checkpoint(tiny_model, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not any(p.name.startswith(".tmp-") for p in tmp_path.iterdir())
