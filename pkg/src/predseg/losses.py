"""Contrastive objectives that fit the MRF and the features simultaneously.

Two flavors:

* position loss — for each target position, its robust-factor agreement with
  its own neighborhood must beat that of randomly drawn impostor feature
  vectors (softmax over {target} ∪ negatives).
* factor loss — every neighbor pair's robust factor must beat factors
  evaluated on a randomly permuted (batch-wide shuffled) feature map, with
  one pooled denominator per offset.

Both return the scalar value actually minimized and leave gradients on the
coupling parameters and (through the per-image feature graphs) the network
weights. Losses are averaged over targets/pairs so magnitudes are comparable
across map sizes; the per-target softmax values the uniform-candidate
identities refer to are unaffected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mrf
from ._util import STREAM_NEGATIVES, rng_for

__all__ = [
    "NegativeSamplingConfig",
    "sample_negative_positions",
    "position_targets",
    "position_loss",
    "position_loss_graph",
    "factor_loss",
    "factor_loss_graph",
]


@dataclass
class NegativeSamplingConfig:
    """How negatives are drawn for a loss.

    ``negatives`` and ``repetitions`` only apply in position mode; the
    factor loss builds its negative set from one batch permutation.
    """

    mode: str
    negatives: int = 10
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("position", "factor"):
            raise ValueError(f"mode must be 'position' or 'factor', got {self.mode!r}")
        if self.negatives < 1 or self.repetitions < 1:
            raise ValueError("negative and repetition counts must be >= 1")


def _as_variable(fm) -> ad.Variable:
    return getattr(fm, "variable", fm)


def _geometry(feats: list[ad.Variable]) -> tuple[int, list[tuple[int, int, int]], np.ndarray]:
    """Channel count, per-image shapes, and flat start offset of each image."""
    shapes = []
    k = feats[0].value.shape[0]
    for f in feats:
        if f.value.ndim != 3:
            raise ValueError(f"feature maps must be (k, H, W), got {f.value.shape}")
        if f.value.shape[0] != k:
            raise ValueError("all feature maps in a batch must share the channel count")
        shapes.append(f.value.shape)
    starts = np.concatenate([[0], np.cumsum([h * w for _, h, w in shapes])])
    return k, shapes, starts


def _negative_matrix(total: int, targets: np.ndarray, count: int, rng) -> np.ndarray:
    """(T, count) indices uniform without replacement over [0,total) minus each row's target."""
    if count > total - 1:
        raise ValueError(
            f"cannot draw {count} negatives from {total} positions (one is the target)"
        )
    T = targets.shape[0]
    if total <= 4096 or 16 * count >= total:
        # exact without-replacement sample via random-key sort; fine at small scale
        keys = rng.random((T, total - 1))
        draw = np.argsort(keys, axis=1)[:, :count].astype(np.int64)
    else:
        # negatives are few relative to the pool: rejection on within-row duplicates
        draw = rng.integers(0, total - 1, size=(T, count))
        while True:
            srt = np.sort(draw, axis=1)
            bad = np.flatnonzero((np.diff(srt, axis=1) == 0).any(axis=1))
            if bad.size == 0:
                break
            draw[bad] = rng.integers(0, total - 1, size=(bad.size, count))
    draw += draw >= targets[:, None]
    return draw


def sample_negative_positions(
    shape: tuple[int, int, int], target: tuple[int, int, int], count: int, rng
) -> np.ndarray:
    """Draw ``count`` distinct (image, row, col) positions, never the target.

    ``shape`` is the batch geometry (images, height, width); the draw is
    uniform without replacement over all other positions in the batch.
    """
    total = int(np.prod(shape))
    tflat = int(np.ravel_multi_index(target, shape))
    flat = _negative_matrix(total, np.array([tflat]), count, rng)[0]
    return np.stack(np.unravel_index(flat, shape), axis=1)


def position_targets(
    shapes: list[tuple[int, int, int]], spec: mrf.NeighborhoodSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Global flat indices of valid targets, plus each target's map width.

    A position qualifies as a target only if its entire neighborhood is in
    bounds; border positions still appear as neighbors and negatives. The
    width array turns an offset (dy, dx) into a flat stride dy*W + dx per
    target, so neighbors stay within the target's own image.
    """
    my, mx = spec.margins
    flats, widths = [], []
    start = 0
    for _, H, W in shapes:
        if H > 2 * my and W > 2 * mx:
            ys, xs = np.mgrid[my : H - my, mx : W - mx]
            flat = start + (ys * W + xs).ravel()
            flats.append(flat)
            widths.append(np.full(flat.size, W, dtype=np.int64))
        start += H * W
    if not flats:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(flats), np.concatenate(widths)


def position_loss_graph(
    features, spec: mrf.NeighborhoodSpec, params: mrf.CouplingParams, negatives: list[np.ndarray]
) -> ad.Variable:
    """Build the position loss graph for given negative draws (one per repetition).

    Per target i with feature g: S(g) = sum over neighbors j of the robust
    factor log M(g, f_j); the per-target loss is logsumexp over candidates
    of S(candidate) - S(target), i.e. -log softmax of the true position.
    Returns the sum over repetitions of the per-target mean.
    """
    feats = [_as_variable(f) for f in features]
    k, shapes, _ = _geometry(feats)
    targets, widths = position_targets(shapes, spec)
    T = targets.shape[0]
    if T == 0:
        return ad.Variable(np.zeros(()))
    F = ad.concat([ad.reshape(f, (k, -1)) for f in feats], axis=1)
    neighbor_cols = {
        off: ad.reshape(
            ad.take_columns(F, targets + off[0] * widths + off[1]), (k, T, 1)
        )
        for off in spec.full_neighbors
    }
    loss = None
    for negs in negatives:
        m = negs.shape[1]
        cand = np.concatenate([targets[:, None], negs], axis=1)
        G = ad.reshape(ad.take_columns(F, cand.ravel()), (k, T, m + 1))
        S = None
        for off in spec.full_neighbors:
            term = mrf.robust_factor_graph(G, neighbor_cols[off], params.for_direction(off))
            S = term if S is None else ad.add(S, term)
        rel = ad.subtract(S, S[:, 0:1])  # shift by the target's own score
        rep_loss = ad.vmean(ad.logsumexp(rel, axis=1))
        loss = rep_loss if loss is None else ad.add(loss, rep_loss)
    return loss


def position_loss(
    features,
    spec: mrf.NeighborhoodSpec,
    params: mrf.CouplingParams,
    cfg: NegativeSamplingConfig,
    rng=None,
    accumulate: bool = True,
) -> float:
    """Evaluate the position loss and backpropagate into params and features.

    With ``accumulate`` (the default), each repetition runs on detached
    feature leaves and only the summed feature gradients flow through the
    network graphs — one backward per feature map instead of one per
    repetition, so repetition graphs are freed eagerly. The direct path
    builds a single graph over all repetitions; both give identical values
    and gradients up to float ordering.
    """
    if cfg.mode != "position":
        raise ValueError("config is not in position mode")
    feats = [_as_variable(f) for f in features]
    _, shapes, _ = _geometry(feats)
    total = sum(h * w for _, h, w in shapes)
    targets, _ = position_targets(shapes, spec)
    if targets.size == 0:
        return 0.0
    if rng is None:
        rng = rng_for(cfg.seed, STREAM_NEGATIVES)
    negatives = [
        _negative_matrix(total, targets, cfg.negatives, rng) for _ in range(cfg.repetitions)
    ]
    if not accumulate:
        loss = position_loss_graph(feats, spec, params, negatives)
        loss.backward()
        return float(loss.value)

    def eval_rep(values, rep):
        leaves = [ad.Variable(v, requires_grad=True) for v in values]
        loss = position_loss_graph(leaves, spec, params, [negatives[rep]])
        loss.backward()
        return float(loss.value), [leaf.grad for leaf in leaves]

    total_loss, acc = ad.accumulate_feature_gradients(feats, eval_rep, cfg.repetitions)
    for f, g in zip(feats, acc):
        if f.requires_grad:
            f.backward(g)
    return total_loss


def factor_loss_graph(
    features, spec: mrf.NeighborhoodSpec, params: mrf.CouplingParams, perm: np.ndarray
) -> ad.Variable:
    """Build the factor loss graph for a given batch-position permutation.

    Positive pairs are all in-bounds neighbor pairs of every map; negatives
    are the same pair geometry read from the permuted feature columns, with
    one pooled logsumexp denominator per offset shared by all of that
    offset's positives.
    """
    feats = [_as_variable(f) for f in features]
    k, shapes, starts = _geometry(feats)
    total = int(starts[-1])
    if perm.shape != (total,):
        raise ValueError(f"permutation must cover all {total} positions")
    F = ad.concat([ad.reshape(f, (k, -1)) for f in feats], axis=1)
    per_pair = []
    for off in spec.offsets:
        idx_i, idx_j = [], []
        for (_, H, W), start in zip(shapes, starts):
            gi, gj = mrf.pair_indices(off, (H, W))
            idx_i.append(start + gi)
            idx_j.append(start + gj)
        gi = np.concatenate(idx_i)
        gj = np.concatenate(idx_j)
        if gi.size == 0:
            continue
        oc = params[off]
        lm_pos = mrf.robust_factor_graph(
            ad.take_columns(F, gi), ad.take_columns(F, gj), oc
        )
        lm_neg = mrf.robust_factor_graph(
            ad.take_columns(F, perm[gi]), ad.take_columns(F, perm[gj]), oc
        )
        den = ad.logsumexp(lm_neg, axis=0)
        per_pair.append(ad.subtract(den, lm_pos))
    if not per_pair:
        raise ValueError("no in-bounds neighbor pairs for any offset")
    return ad.vmean(ad.concat(per_pair, axis=0))


def factor_loss(
    features, spec: mrf.NeighborhoodSpec, params: mrf.CouplingParams, rng
) -> float:
    """Evaluate the factor loss and backpropagate into params and features."""
    feats = [_as_variable(f) for f in features]
    _, shapes, starts = _geometry(feats)
    perm = rng.permutation(int(starts[-1]))
    loss = factor_loss_graph(feats, spec, params, perm)
    loss.backward()
    return float(loss.value)
