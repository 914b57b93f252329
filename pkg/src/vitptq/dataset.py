"""On-disk image datasets: one raw float32 file per sample plus an index.

Layout of a dataset directory::

    index.csv        columns: name, shape, label  (shape like ``3x32x32``;
                     label may be empty for unlabeled sets)
    <name>.f32       row-major little-endian float32 sample

``load_calibration`` draws an unlabeled subset; ``load_dataset`` returns
images and labels for evaluation.
"""

import csv
import io
import os

import numpy as np

from .checkpoint import atomic_write

INDEX = "index.csv"
FIELDS = ("name", "shape", "label")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif", ".tif", ".tiff", ".webp")


class DatasetError(ValueError):
    pass


def write_dataset(directory, images, labels=None, prefix="s"):
    images = np.asarray(images, dtype=np.float32)
    if labels is not None and len(labels) != len(images):
        raise DatasetError("labels and images differ in length")
    os.makedirs(directory, exist_ok=True)
    width = max(5, len(str(len(images))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for i, img in enumerate(images):
        name = f"{prefix}{i:0{width}d}"
        atomic_write(os.path.join(directory, name + ".f32"), np.ascontiguousarray(img, dtype="<f4").tobytes())
        label = "" if labels is None else int(labels[i])
        w.writerow((name, "x".join(str(d) for d in img.shape), label))
    atomic_write(os.path.join(directory, INDEX), buf.getvalue().encode("utf-8"))


def read_index(directory):
    path = os.path.join(directory, INDEX)
    if not os.path.isdir(directory):
        raise DatasetError(f"dataset directory {directory} does not exist")
    if not os.path.exists(path):
        raise DatasetError(f"{path} not found")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    entries = []
    for n, row in enumerate(rows, start=2):
        try:
            shape = tuple(int(d) for d in row["shape"].split("x"))
            label = int(row["label"]) if row.get("label") not in (None, "") else None
            entries.append((row["name"], shape, label))
        except (KeyError, ValueError, AttributeError) as e:
            raise DatasetError(f"{path}:{n}: malformed index row ({e})") from e
    return entries


def _read_sample(directory, name, shape):
    path = os.path.join(directory, name + ".f32")
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise DatasetError(f"cannot read sample {path}: {e}") from e
    if raw.size != int(np.prod(shape)):
        raise DatasetError(f"{path}: {raw.size} values, index says shape {shape}")
    return raw.reshape(shape).astype(np.float32)


def _stack(directory, entries):
    if len({e[1] for e in entries}) > 1:
        raise DatasetError("samples have differing shapes")
    return np.stack([_read_sample(directory, name, shape) for name, shape, _ in entries])


def load_dataset(directory):
    """(images, labels); labels are -1 where the index leaves them empty."""
    entries = read_index(directory)
    if not entries:
        raise DatasetError(f"dataset {directory} is empty")
    labels = np.array([-1 if lab is None else lab for _, _, lab in entries], dtype=np.int64)
    return _stack(directory, entries), labels


def load_calibration(directory, n=1024, seed=0):
    """``n`` images drawn without replacement (shuffled order); labels are not read."""
    entries = read_index(directory)
    if n < 1:
        raise DatasetError("calibration size must be >= 1")
    if len(entries) < n:
        raise DatasetError(f"dataset {directory} has {len(entries)} samples, {n} requested")
    pick = np.random.default_rng(seed).permutation(len(entries))[:n]
    return _stack(directory, [entries[i] for i in pick])


def import_image_folder(src, dst, image_size=32, mean=0.5, std=0.25):
    """Convert ``src/<class>/<image>`` files into the raw format (classes sorted by name).

    Images are resized to ``image_size`` squared RGB and normalized as
    ``(pixel / 255 - mean) / std``. Needs Pillow.
    """
    try:
        from PIL import Image
    except ImportError as e:
        raise RuntimeError("importing image folders needs Pillow (pip install Pillow)") from e
    if not os.path.isdir(src):
        raise DatasetError(f"image folder {src} does not exist")
    classes = sorted(d for d in os.listdir(src) if os.path.isdir(os.path.join(src, d)))
    if not classes:
        raise DatasetError(f"{src} has no class subdirectories")
    images, labels = [], []
    for label, cls in enumerate(classes):
        for fname in sorted(os.listdir(os.path.join(src, cls))):
            if not fname.lower().endswith(IMAGE_SUFFIXES):
                continue
            with Image.open(os.path.join(src, cls, fname)) as im:
                im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
            images.append((arr - mean) / std)
            labels.append(label)
    if not images:
        raise DatasetError(f"no images found under {src}")
    write_dataset(dst, np.stack(images), np.array(labels))
    return classes
