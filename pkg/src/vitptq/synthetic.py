"""Seeded toy image-classification data for the fixture model.

Each class is an oriented colour grating. An image shows its class grating
inside a random window, a weaker distractor grating of another class over
the whole frame, and pixel noise.
"""

import numpy as np

NUM_CLASSES = 10


def _class_table(num_classes, rng):
    angles = np.linspace(0, np.pi, num_classes, endpoint=False) + rng.uniform(0, 0.1)
    freqs = np.where(np.arange(num_classes) % 2 == 0, 0.18, 0.32) * 2 * np.pi
    colors = rng.uniform(0.2, 1.0, (num_classes, 3))
    return angles, freqs, colors


def _grating(angle, freq, phase, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)


def make_images(n, seed, image_size=32, num_classes=NUM_CLASSES, noise=0.6, distractor=0.55):
    """Returns (images float32 (n, 3, S, S), labels int64 (n,))."""
    table = _class_table(num_classes, np.random.default_rng(12345))
    angles, freqs, colors = table
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i, c in enumerate(labels):
        g = _grating(angles[c], freqs[c], rng.uniform(0, 2 * np.pi), image_size)
        w = rng.integers(image_size // 3, image_size // 2 + 4)
        y0, x0 = rng.integers(0, image_size - w + 1, 2)
        mask = np.zeros((image_size, image_size))
        mask[y0:y0 + w, x0:x0 + w] = 1.0
        d = (c + rng.integers(1, num_classes)) % num_classes
        gd = _grating(angles[d], freqs[d], rng.uniform(0, 2 * np.pi), image_size)
        img = (colors[c][:, None, None] * (g * mask)[None]
               + distractor * colors[d][:, None, None] * gd[None]
               + noise * rng.standard_normal((3, image_size, image_size)))
        images[i] = img
    return images, labels.astype(np.int64)
