"""Small shared helpers: deterministic seeding and bilinear resizing."""

from __future__ import annotations

import numpy as np

# Stream tags keep the per-purpose RNGs of a run statistically independent
# while staying reproducible from the single user-facing seed.
STREAM_DATA = 1
STREAM_CROP = 2
STREAM_NOISE = 3
STREAM_NEGATIVES = 4
STREAM_INIT = 5
STREAM_SHUFFLE = 6


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Generator for a (seed, stream, indices...) path, independent per path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def bilinear_resize(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes of ``arr`` to ``out_hw`` with bilinear sampling.

    Pixel centers are aligned: output center (i + 0.5) / H_out maps to the
    same relative position in the source grid.
    """
    h_out, w_out = out_hw
    h_in, w_in = arr.shape[-2:]
    if (h_in, w_in) == (h_out, w_out):
        return arr.copy()
    y = (np.arange(h_out) + 0.5) * (h_in / h_out) - 0.5
    x = (np.arange(w_out) + 0.5) * (w_in / w_out) - 0.5
    y = np.clip(y, 0.0, h_in - 1.0)
    x = np.clip(x, 0.0, w_in - 1.0)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    wy = (y - y0).reshape(-1, 1)
    wx = (x - x0).reshape(1, -1)
    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    top = a * (1.0 - wx) + b * wx
    bot = c * (1.0 - wx) + d * wx
    return top * (1.0 - wy) + bot * wy
