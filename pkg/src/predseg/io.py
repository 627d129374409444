"""Image decoding, random crops, the PSTF tensor file format, and contour PNGs.

PSTF ("predseg tensor file") is a minimal row-major binary format::

    magic   4 bytes  b"PSTF"
    dtype   u8       1 = float32, 2 = float64
    ndim    u8
    dims    ndim x u32, little endian
    data    raw little-endian values, row major

Values must be finite; NaN/Inf are rejected both when writing and loading.
"""

from __future__ import annotations

import concurrent.futures
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._util import STREAM_CROP, STREAM_DATA, bilinear_resize, rng_for

PSTF_MAGIC = b"PSTF"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class TensorFormatError(ValueError):
    """Raised for malformed PSTF files (bad magic, truncation, bad values)."""


class ImageFormatError(ValueError):
    """Raised for image files that are not decodable PNG or JPEG."""


@dataclass
class ImageSample:
    """An RGB image as float channels in [0, 1], shaped (3, H, W)."""

    pixels: np.ndarray
    source_id: str
    crop_origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) pixels, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def write_tensor(arr: np.ndarray, path) -> None:
    """Write ``arr`` as a PSTF file. Only float32/float64 arrays are supported."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR_KIND:
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("refusing to write non-finite values")
    code = _CODE_FOR_KIND[arr.dtype]
    header = PSTF_MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    """Read a PSTF file back into a numpy array (row major)."""
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise TensorFormatError(f"{path}: truncated header")
    if raw[:4] != PSTF_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    code, ndim = struct.unpack("<BB", raw[4:6])
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    dims_end = 6 + 4 * ndim
    if len(raw) < dims_end:
        raise TensorFormatError(f"{path}: truncated dimension list")
    shape = struct.unpack(f"<{ndim}I", raw[6:dims_end])
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = dims_end + count * dtype.itemsize
    if len(raw) != expected:
        raise TensorFormatError(
            f"{path}: payload has {len(raw) - dims_end} bytes, expected {count * dtype.itemsize}"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=dims_end).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError(f"{path}: non-finite values in payload")
    return arr.copy()


def load_image(path) -> ImageSample:
    """Decode a PNG or JPEG into an ImageSample with channels scaled to [0, 1].

    Grayscale inputs are replicated to 3 channels; alpha channels are dropped.
    """
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a decodable image ({exc})") from exc
    if img.format not in ("PNG", "JPEG"):
        raise ImageFormatError(f"{path}: unsupported format {img.format!r} (want PNG or JPEG)")
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
        arr = np.clip(arr, 0.0, 1.0)
        pixels = np.repeat(arr[None, :, :], 3, axis=0)
    else:
        rgb = img if img.mode == "RGB" else img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
        pixels = np.moveaxis(arr, -1, 0)
    return ImageSample(pixels=np.ascontiguousarray(pixels), source_id=path.stem)


def random_crop(img: ImageSample, size: tuple[int, int], rng: np.random.Generator) -> ImageSample:
    """Crop ``img`` to ``size`` at an origin drawn uniformly over valid origins.

    Images smaller than the crop in either dimension are first bilinearly
    upscaled so both dimensions reach the crop size (shorter side hits it
    exactly for square crops).
    """
    h, w = size
    pixels = img.pixels
    H, W = pixels.shape[1:]
    if H < h or W < w:
        scale = max(h / H, w / W)
        new_hw = (max(h, round(H * scale)), max(w, round(W * scale)))
        pixels = np.clip(bilinear_resize(pixels, new_hw), 0.0, 1.0)
        H, W = new_hw
    r0 = int(rng.integers(0, H - h + 1))
    c0 = int(rng.integers(0, W - w + 1))
    return ImageSample(
        pixels=np.ascontiguousarray(pixels[:, r0 : r0 + h, c0 : c0 + w]),
        source_id=img.source_id,
        crop_origin=(r0, c0),
    )


def write_contour_png(values: np.ndarray, path) -> None:
    """Save a contour map in [0, 1] as 16-bit grayscale PNG scaled to [0, 65535]."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"contour map must be (H, W), got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("contour map has non-finite values")
    q = np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(Path(path), format="PNG")


def read_contour_png(path) -> np.ndarray:
    """Load a 16-bit (or 8-bit) grayscale contour PNG back to floats in [0, 1]."""
    img = Image.open(Path(path))
    img.load()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        arr = arr.mean(axis=-1)
    peak = 65535.0 if arr.max() > 255 or img.mode in ("I;16", "I;16B", "I;16L", "I") else 255.0
    return np.clip(arr / peak, 0.0, 1.0)


def list_images(corpus_dir) -> list[Path]:
    """Sorted list of PNG/JPEG files directly inside ``corpus_dir``."""
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus_dir}")
    return sorted(p for p in corpus_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def epoch_permutation(n_items: int, seed: int, epoch: int) -> np.ndarray:
    """The seeded iteration order of one epoch (recorded in the run manifest)."""
    return rng_for(seed, STREAM_DATA, epoch).permutation(n_items)


@dataclass
class CropDataset:
    """Seeded, optionally prefetching iterator of random crops over a corpus.

    Every epoch visits each file once in a fresh seeded permutation; crops use
    one RNG per (epoch, slot) so decoding on multiple workers cannot change
    the sample stream.
    """

    paths: list[Path]
    crop: tuple[int, int]
    seed: int
    workers: int = 1
    _epoch_orders: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.paths:
            raise FileNotFoundError("corpus is empty")

    def __len__(self) -> int:
        return len(self.paths)

    def order(self, epoch: int) -> list[int]:
        if epoch not in self._epoch_orders:
            self._epoch_orders[epoch] = [int(i) for i in epoch_permutation(len(self.paths), self.seed, epoch)]
        return self._epoch_orders[epoch]

    def _load_slot(self, epoch: int, slot: int, file_index: int) -> ImageSample:
        sample = load_image(self.paths[file_index])
        return random_crop(sample, self.crop, rng_for(self.seed, STREAM_CROP, epoch, slot))

    def epoch(self, epoch: int):
        """Yield the epoch's samples in seeded order."""
        order = self.order(epoch)
        if self.workers <= 1:
            for slot, file_index in enumerate(order):
                yield self._load_slot(epoch, slot, file_index)
            return
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.workers) as pool:
            args = [(epoch, slot, fi) for slot, fi in enumerate(order)]
            yield from pool.map(lambda a: self._load_slot(*a), args)
