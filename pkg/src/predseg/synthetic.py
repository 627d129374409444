"""Synthetic two-region images with known boundaries.

These are the smoke-test workhorse: each image is split into two flat color
regions by a horizontal or vertical line, with mild pixel noise. The split
position and the two colors are random, so a model must actually pick up
"nearby pixels look alike" to do well; the true boundary is returned
alongside for benchmarking without human annotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["TwoRegionSample", "two_region_sample", "write_two_region_corpus"]


@dataclass
class TwoRegionSample:
    pixels: np.ndarray  # (3, H, W) floats in [0, 1]
    labels: np.ndarray  # (H, W) int, 0 or 1
    boundary: np.ndarray  # (H, W) bool, first pixels of region 1


def two_region_sample(
    shape: tuple[int, int], rng: np.random.Generator, noise: float = 0.05
) -> TwoRegionSample:
    """One image split into two random colors along a random axis.

    The split falls in the middle third so both regions stay substantial,
    and the colors are redrawn until they sit at least 0.4 apart in RGB so
    the boundary is learnable at all. The default noise level is deliberately
    generous: the affinity quantile shift clamps the bottom 30% of pairwise
    log-odds to a fixed floor, and with near-noiseless regions that floor is
    no cheaper than the true boundary cut, which makes spectral partitions
    wander. Pixel noise spreads the within-region weights well above the
    floor and leaves the real boundary as the one cheap place to cut.
    """
    h, w = shape
    if h < 3 or w < 3:
        raise ValueError(f"image too small for two regions: {shape}")
    axis = int(rng.integers(0, 2))  # 0: horizontal split line, 1: vertical
    extent = shape[axis]
    lo, hi = extent // 3, 2 * extent // 3
    split = int(rng.integers(lo, max(lo + 1, hi)))
    while True:
        colors = rng.uniform(0.0, 1.0, (2, 3))
        if float(np.linalg.norm(colors[0] - colors[1])) >= 0.4:
            break
    labels = np.zeros((h, w), dtype=np.int64)
    if axis == 0:
        labels[split:, :] = 1
    else:
        labels[:, split:] = 1
    pixels = colors[labels].transpose(2, 0, 1)
    if noise > 0.0:
        pixels = pixels + rng.normal(0.0, noise, pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    boundary = np.zeros((h, w), dtype=bool)
    if axis == 0:
        boundary[split, :] = True
    else:
        boundary[:, split] = True
    return TwoRegionSample(pixels=pixels, labels=labels, boundary=boundary)


def write_two_region_corpus(
    directory, count: int, shape: tuple[int, int] = (32, 32), seed: int = 0
) -> list[Path]:
    """Write ``count`` two-region PNGs into ``directory`` and return their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        sample = two_region_sample(shape, np.random.default_rng([seed, i]))
        arr = np.round(sample.pixels * 255.0).astype(np.uint8).transpose(1, 2, 0)
        path = directory / f"tworegion{i:04d}.png"
        Image.fromarray(arr).save(path, format="PNG")
        paths.append(path)
    return paths
