"""Checkpoint container: UTF-8 JSON manifest + raw little-endian float32 payload.

Layout::

    b"VITPTQ-CKPT\\n"
    uint64 LE   manifest byte length
    manifest    JSON (sorted keys)
    payload     tensor blobs back to back, row-major

The manifest records the format version, the ViT config, a tensor directory
(name -> shape, dtype, offset, length in bytes), per-block activation kinds,
quantization records for quantized models, and provenance.
"""

import json
import os
import struct
import tempfile
from dataclasses import asdict

import numpy as np

from .autograd import Tensor
from .vit import ViT, ViTConfig

MAGIC = b"VITPTQ-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path, data):
    """Write bytes to a temp file in the target directory, then rename over path."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(tensors, manifest_extra):
    directory = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    manifest = dict(manifest_extra, format_version=FORMAT_VERSION, tensors=directory)
    head = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def decode(data):
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint container (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if len(data) < pos + n:
        raise CheckpointError("truncated checkpoint manifest")
    manifest = json.loads(data[pos:pos + n].decode("utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
    payload = memoryview(data)[pos + n:]
    tensors = {}
    spans = []
    for name, ent in manifest["tensors"].items():
        off, length = ent["offset"], ent["length"]
        shape = tuple(ent["shape"])
        if ent.get("dtype") != "float32":
            raise CheckpointError(f"{name}: unsupported dtype {ent.get('dtype')!r}")
        if off < 0 or off + length > len(payload):
            raise CheckpointError(f"{name}: blob [{off}, {off + length}) exceeds payload of {len(payload)} bytes")
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: length {length} does not match shape {shape}")
        spans.append((off, off + length, name))
        tensors[name] = np.frombuffer(payload[off:off + length], dtype="<f4").reshape(shape).astype(np.float32)
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"overlapping blobs {an} and {bn}")
    return manifest, tensors


def model_tensors(model):
    return {name: t.data for name, t in model.named_parameters().items()}


def model_from(manifest, tensors):
    cfg = ViTConfig(**manifest["config"])
    model = ViT.init(cfg, seed=0)
    for name, ref in model.named_parameters().items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        if tensors[name].shape != ref.shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != {ref.shape}")
        model.set_parameter(name, Tensor._wrap(tensors[name]))
    kinds = manifest.get("activation_kinds") or [b.activation for b in model.blocks]
    for blk, kind in zip(model.blocks, kinds):
        blk.activation = kind
    return model


def save_checkpoint(model, path, provenance=None):
    """Serialize a ViT or QuantizedModel; identical input gives identical bytes."""
    if hasattr(model, "quant_manifest"):
        base = model.base
        tensors = model_tensors(base)
        tensors.update(model.extra_tensors())
        extra = {"kind": "quantized", "quant": model.quant_manifest()}
        prov = dict(model.provenance)
    else:
        base = model
        tensors = model_tensors(model)
        extra = {"kind": "float"}
        prov = {}
    prov.update(provenance or {})
    extra.update(config=asdict(base.config), activation_kinds=base.activation_kinds(), provenance=prov)
    try:
        atomic_write(path, encode(tensors, extra))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    manifest, tensors = decode(data)
    model = model_from(manifest, tensors)
    if manifest.get("kind") == "quantized":
        from .pipeline import QuantizedModel
        return QuantizedModel.from_manifest(model, manifest, tensors)
    return model


def fixture_path():
    return os.path.join(os.path.dirname(__file__), "data", "fixture.ckpt")


def load_fixture():
    """The bundled trained toy ViT."""
    return load_checkpoint(fixture_path())
