"""Switched pairwise Gaussian MRF over feature maps.

Each pair of neighboring feature vectors (f_i, f_j) interacts through a
factor that is either a Gaussian attraction (switch w=1) or constant
(w=0), with a Bernoulli prior p on the switch. Marginalizing the switch
gives a heavy-tailed "robust" factor; conditioning on the features gives
per-edge connectivity log-odds. The normalization ratio Z(w=0)/Z(w=1)
keeps the switch prior calibrated: with both features marginalized under
the standard-normal base measure, p(w=1) = p exactly.

Scalar operations are plain numpy (broadcasting over leading axes) and are
used for inference, map evaluation, and as oracle targets; the ``*_graph``
variants build autodiff graphs for training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, logit as _logit

from . import autodiff as ad
from . import io as pio

__all__ = [
    "NeighborhoodSpec",
    "OffsetCoupling",
    "CouplingParams",
    "ConnectivityMap",
    "log_pair_energy",
    "log_znorm_ratio",
    "log_robust_factor",
    "posterior_logodds",
    "pair_energy_graph",
    "logodds_graph",
    "robust_factor_graph",
    "valid_block",
    "pair_indices",
    "connectivity_map",
]

# Canonical offsets per neighbor count. An offset (dy, dx) stands for the
# undirected edge family {i, i + (dy, dx)}; the other half of the
# neighborhood is the negations. Canonical means dy > 0, or dy == 0 and
# dx > 0, so an offset and its negation can never both appear.
_STANDARD_OFFSETS = {
    4: ((0, 1), (1, 0)),
    8: ((0, 1), (1, 0), (1, 1), (1, -1)),
    12: ((0, 1), (1, 0), (1, 1), (1, -1), (0, 2), (2, 0)),
    20: (
        (0, 1),
        (1, 0),
        (1, 1),
        (1, -1),
        (0, 2),
        (2, 0),
        (1, 2),
        (2, 1),
        (1, -2),
        (2, -1),
    ),
}


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Canonical relative offsets defining which pixel pairs interact."""

    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        seen = set()
        for dy, dx in self.offsets:
            if not (dy > 0 or (dy == 0 and dx > 0)):
                raise ValueError(f"offset {(dy, dx)} is not canonical (dy>0 or dy==0,dx>0)")
            if (dy, dx) in seen:
                raise ValueError(f"duplicate offset {(dy, dx)}")
            seen.add((dy, dx))

    @classmethod
    def standard(cls, neighbor_count: int) -> "NeighborhoodSpec":
        try:
            return cls(_STANDARD_OFFSETS[neighbor_count])
        except KeyError:
            raise ValueError(
                f"neighbor count must be one of {sorted(_STANDARD_OFFSETS)}, got {neighbor_count}"
            ) from None

    @property
    def neighbor_count(self) -> int:
        return 2 * len(self.offsets)

    @property
    def full_neighbors(self) -> tuple[tuple[int, int], ...]:
        """Offsets plus their negations: every neighbor of a position."""
        return self.offsets + tuple((-dy, -dx) for dy, dx in self.offsets)

    @property
    def margins(self) -> tuple[int, int]:
        """(row, col) border width inside which some neighbor is out of bounds."""
        return (
            max(abs(dy) for dy, _ in self.full_neighbors),
            max(abs(dx) for _, dx in self.full_neighbors),
        )

    def interior_slices(self, shape: tuple[int, int]) -> tuple[slice, slice]:
        """Slices of positions whose entire neighborhood is in bounds."""
        my, mx = self.margins
        H, W = shape
        return slice(my, H - my), slice(mx, W - mx)


def valid_block(offset: tuple[int, int], shape: tuple[int, int]) -> tuple[slice, slice]:
    """Slices of source positions i for which i + offset is in bounds.

    Canonical offsets have dy >= 0, so the valid set is always a rectangle
    anchored at the top of the map.
    """
    dy, dx = offset
    H, W = shape
    return slice(0, H - dy), slice(max(0, -dx), W - max(0, dx))


def pair_indices(offset: tuple[int, int], shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Flat (row-major) index arrays (idx_i, idx_j) of all in-bounds pairs."""
    dy, dx = offset
    H, W = shape
    rows, cols = valid_block(offset, shape)
    ys, xs = np.mgrid[rows, cols]
    idx_i = (ys * W + xs).ravel()
    idx_j = ((ys + dy) * W + (xs + dx)).ravel()
    return idx_i, idx_j


# ---------------------------------------------------------------------------
# scalar factor operations (numpy, broadcast over leading axes)
# ---------------------------------------------------------------------------


def log_pair_energy(f_i, f_j, c):
    """Log of the Gaussian attraction factor: -1/2 sum_l c_l (f_il - f_jl)^2."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if f_i.shape[-1] != f_j.shape[-1] or f_i.shape[-1] != c.shape[-1]:
        raise ValueError(
            f"channel mismatch: f_i {f_i.shape}, f_j {f_j.shape}, c {c.shape}"
        )
    d = f_i - f_j
    return -0.5 * np.sum(c * d * d, axis=-1)


def log_znorm_ratio(c):
    """log Z(w=0)/Z(w=1) = 1/2 sum_l log(1 + 2 c_l), the switch-prior corrector.

    Equals -log E[exp(log_pair_energy)] under f_i, f_j ~ N(0, I); adding it
    to the pair energy makes the w=1 branch integrate to exactly p.
    """
    c = np.asarray(c, dtype=np.float64)
    if np.any(c <= 0):
        raise ValueError("coupling coefficients must be positive")
    return 0.5 * np.sum(np.log1p(2.0 * c), axis=-1)


def log_robust_factor(f_i, f_j, c, p):
    """Log of the switch-marginalized factor p*exp(r+e) + (1-p).

    Computed as a log-sum-exp of the two branch logs, so huge energies
    underflow gracefully to log(1-p) instead of rounding through exp.
    """
    e = log_pair_energy(f_i, f_j, c)
    r = log_znorm_ratio(c)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log(p) + r + e, np.log1p(-p))


def posterior_logodds(f_i, f_j, c, p):
    """log p(w=1|f)/p(w=0|f) = logit(p) + log_znorm_ratio + log_pair_energy."""
    e = log_pair_energy(f_i, f_j, c)
    r = log_znorm_ratio(c)
    with np.errstate(divide="ignore"):
        return _logit(np.asarray(p, dtype=np.float64)) + r + e


# ---------------------------------------------------------------------------
# trainable parameters and autodiff graph builders
# ---------------------------------------------------------------------------


@dataclass
class OffsetCoupling:
    """Trainable coupling for one canonical offset.

    Stored in unconstrained form: c = exp(log_c) stays positive and
    p = sigmoid(logit_p) stays in (0,1) under plain gradient steps.
    """

    log_c: ad.Variable
    logit_p: ad.Variable

    @property
    def c(self) -> np.ndarray:
        return np.exp(self.log_c.value)

    @property
    def p(self) -> float:
        return float(expit(self.logit_p.value))


class CouplingParams:
    """Per-offset couplings and switch priors for a whole neighborhood."""

    def __init__(self, spec: NeighborhoodSpec, channels: int):
        if channels < 1:
            raise ValueError("need at least one feature channel")
        self.spec = spec
        self.channels = channels
        self.couplings: dict[tuple[int, int], OffsetCoupling] = {}
        for i, off in enumerate(spec.offsets):
            self.couplings[off] = OffsetCoupling(
                log_c=ad.Variable(
                    np.zeros(channels), requires_grad=True, name=f"mrf{i}.log_c"
                ),
                logit_p=ad.Variable(np.zeros(()), requires_grad=True, name=f"mrf{i}.logit_p"),
            )

    def __getitem__(self, offset: tuple[int, int]) -> OffsetCoupling:
        return self.couplings[offset]

    def for_direction(self, offset: tuple[int, int]) -> OffsetCoupling:
        """Coupling for any direction: an offset and its negation share parameters."""
        if offset in self.couplings:
            return self.couplings[offset]
        return self.couplings[(-offset[0], -offset[1])]

    def named_params(self) -> dict[str, ad.Variable]:
        out = {}
        for i, off in enumerate(self.spec.offsets):
            oc = self.couplings[off]
            out[f"mrf{i}.log_c"] = oc.log_c
            out[f"mrf{i}.logit_p"] = oc.logit_p
        return out

    def param_group(self) -> ad.ParamGroup:
        # Factor parameters train with a 10x learning rate and are exempt
        # from weight decay (decaying log_c/logit_p toward 0 would drag the
        # model back to its c=1, p=0.5 initialization).
        return ad.ParamGroup(
            params=self.named_params(), lr_multiplier=10.0, weight_decay=False, name="mrf"
        )


def pair_energy_graph(f_i: ad.Variable, f_j: ad.Variable, coupling: OffsetCoupling) -> ad.Variable:
    """Differentiable pair energy for (k, ...) stacks of feature vectors.

    Channels are the leading axis; any trailing axes broadcast (f_i and f_j
    may differ there, e.g. candidates vs a single neighbor column).
    """
    c = ad.exp(coupling.log_c)
    dsq = ad.square(ad.subtract(f_i, f_j))
    k = coupling.log_c.value.shape[0]
    cshape = (k,) + (1,) * (dsq.value.ndim - 1)
    return ad.multiply(-0.5, ad.vsum(ad.multiply(ad.reshape(c, cshape), dsq), axis=0))


def _znorm_graph(coupling: OffsetCoupling) -> ad.Variable:
    c = ad.exp(coupling.log_c)
    return ad.multiply(0.5, ad.vsum(ad.log1p(ad.multiply(2.0, c))))


def logodds_graph(f_i: ad.Variable, f_j: ad.Variable, coupling: OffsetCoupling) -> ad.Variable:
    """Differentiable posterior log-odds over (k, M) feature columns."""
    e = pair_energy_graph(f_i, f_j, coupling)
    return ad.add(ad.add(coupling.logit_p, _znorm_graph(coupling)), e)


def robust_factor_graph(
    f_i: ad.Variable, f_j: ad.Variable, coupling: OffsetCoupling
) -> ad.Variable:
    """Differentiable log robust factor.

    Uses log(p e^{r+e} + 1-p) = softplus(logit_p + r + e) - softplus(logit_p),
    which is stable for any magnitude of the posterior log-odds.
    """
    t = logodds_graph(f_i, f_j, coupling)
    return ad.subtract(ad.softplus(t), ad.softplus(coupling.logit_p))


# ---------------------------------------------------------------------------
# connectivity maps
# ---------------------------------------------------------------------------


@dataclass
class ConnectivityMap:
    """Per-offset grids of posterior log-odds with in-bounds validity masks.

    ``logodds[offset][y, x]`` scores the edge between (y, x) and
    (y+dy, x+dx); entries where the partner is out of bounds are masked
    False and hold 0.0 placeholders that must never be read.
    """

    height: int
    width: int
    offsets: tuple[tuple[int, int], ...]
    logodds: dict[tuple[int, int], np.ndarray]
    valid: dict[tuple[int, int], np.ndarray]

    def save(self, directory) -> None:
        """Write one tensor per offset (valid rectangle only) plus a manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "schema_version": 1,
            "height": self.height,
            "width": self.width,
            "offsets": [list(off) for off in self.offsets],
            "tensors": [],
        }
        for i, off in enumerate(self.offsets):
            rows, cols = valid_block(off, (self.height, self.width))
            name = f"offset{i}.pstf"
            pio.write_tensor(self.logodds[off][rows, cols], directory / name)
            manifest["tensors"].append(name)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "ConnectivityMap":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        H, W = int(manifest["height"]), int(manifest["width"])
        offsets = tuple((int(dy), int(dx)) for dy, dx in manifest["offsets"])
        logodds, valid = {}, {}
        for off, name in zip(offsets, manifest["tensors"]):
            rows, cols = valid_block(off, (H, W))
            grid = np.zeros((H, W))
            block = pio.read_tensor(directory / name)
            expected = (rows.stop - rows.start, cols.stop - cols.start)
            if block.shape != expected:
                raise pio.TensorFormatError(
                    f"offset {off}: tensor shape {block.shape} does not match geometry {expected}"
                )
            grid[rows, cols] = block
            mask = np.zeros((H, W), dtype=bool)
            mask[rows, cols] = True
            logodds[off] = grid
            valid[off] = mask
        return cls(height=H, width=W, offsets=offsets, logodds=logodds, valid=valid)


def connectivity_map(features, spec: NeighborhoodSpec, params: CouplingParams) -> ConnectivityMap:
    """Posterior log-odds of connection at every in-bounds neighbor pair."""
    values = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"expected (k, H, W) features, got shape {values.shape}")
    k, H, W = values.shape
    if k != params.channels:
        raise ValueError(f"feature map has {k} channels, params expect {params.channels}")
    logodds, valid = {}, {}
    for off in spec.offsets:
        dy, dx = off
        rows, cols = valid_block(off, (H, W))
        fi = values[:, rows, cols]
        fj = values[:, rows.start + dy : rows.stop + dy, cols.start + dx : cols.stop + dx]
        oc = params[off]
        grid = np.zeros((H, W))
        # move channels last for the broadcasting scalar op
        grid[rows, cols] = posterior_logodds(
            np.moveaxis(fi, 0, -1), np.moveaxis(fj, 0, -1), oc.c, oc.p
        )
        mask = np.zeros((H, W), dtype=bool)
        mask[rows, cols] = True
        logodds[off] = grid
        valid[off] = mask
    return ConnectivityMap(height=H, width=W, offsets=spec.offsets, logodds=logodds, valid=valid)
