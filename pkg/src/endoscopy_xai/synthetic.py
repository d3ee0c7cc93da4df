"""Synthetic colour-coded corpora for desk-scale runs and tests."""

from pathlib import Path

import numpy as np
from PIL import Image

PALETTE = [(200, 40, 40), (40, 170, 60), (50, 60, 210), (200, 190, 40),
           (150, 50, 170), (40, 180, 190), (230, 130, 30), (120, 120, 120)]


def make_color_corpus(root, num_classes=3, per_class=20, size=64, noise=12.0, seed=0):
    """Class-per-folder PNG corpus whose classes differ by base colour.

    The classes are linearly separable in mean-colour space; each image adds
    Gaussian pixel noise and a darker blob at a random position.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    for k in range(num_classes):
        class_dir = root / f"class_{k}"
        class_dir.mkdir(parents=True, exist_ok=True)
        base = np.array(PALETTE[k % len(PALETTE)], dtype=np.float64)
        for i in range(per_class):
            img = base + rng.normal(0, noise, (size, size, 3))
            cy, cx = rng.integers(size // 4, 3 * size // 4, 2)
            yy, xx = np.mgrid[:size, :size]
            img[(yy - cy) ** 2 + (xx - cx) ** 2 < (size // 8) ** 2] *= 0.7
            Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(class_dir / f"img_{i:03d}.png")
    return root
