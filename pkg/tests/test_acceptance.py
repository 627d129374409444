"""Acceptance gate: the numbered release criteria, one test per criterion.

Each test re-derives its oracle here (quadrature, enumeration, finite
differences, dense eigensolver) rather than trusting any library internals,
asserts the stated tolerance, and prints one summary line with the measured
values. Run with ``pytest -v`` to get one pass/fail line per criterion.
"""

import json
import math
import time

import numpy as np
import pytest
import scipy.linalg
from scipy import integrate

from predseg import autodiff as ad
from predseg import bench, losses, models, mrf, optim, segment, synthetic
from predseg.cli import main as cli_main

_NORM = 1.0 / math.sqrt(2.0 * math.pi)
TWO_PX_AT_32 = 2.0 / float(np.hypot(32.0, 32.0))


def report(number, name, detail):
    print(f"criterion {number:02d} [{name}]: PASS — {detail}")


def feature_vars(arrays, requires_grad=False):
    return [ad.Variable(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)
            for a in arrays]


def randomized_params(spec, k, seed):
    rng = np.random.default_rng(seed)
    params = mrf.CouplingParams(spec, channels=k)
    for off in spec.offsets:
        params[off].log_c.value[:] = rng.standard_normal(k) * 0.4
        params[off].logit_p.value[()] = rng.standard_normal() * 0.5
    return params


# ------------------------------------------------------------------ 1

def znorm_quadrature(c):
    """-log E[exp(-c/2 (x-y)^2)], x,y ~ N(0,1), by adaptive 2-D quadrature."""
    val, err = integrate.dblquad(
        lambda y, x: _NORM ** 2 * math.exp(-0.5 * (x * x + y * y) - 0.5 * c * (x - y) ** 2),
        -8.0, 8.0, -8.0, 8.0, epsabs=1e-10, epsrel=1e-10,
    )
    assert err < 1e-8
    return -math.log(val)


def test_criterion_01_normalization_constant_oracle():
    started = time.time()
    c_grid = [0.01, 0.5, 1.0, 4.0, 20.0]
    oracle = {c: znorm_quadrature(c) for c in c_grid}
    worst = 0.0
    for c in c_grid:
        worst = max(worst, abs(float(mrf.log_znorm_ratio([c])) - oracle[c]))
        triple = [c, c, c]
        worst = max(
            worst, abs(float(mrf.log_znorm_ratio(triple)) - 3 * oracle[c])
        )
    mixed = [0.01, 1.0, 20.0]
    worst = max(
        worst,
        abs(float(mrf.log_znorm_ratio(mixed)) - sum(oracle[c] for c in mixed)),
    )
    elapsed = time.time() - started
    assert worst < 1e-6
    assert elapsed < 10.0
    report(1, "normalization-constant oracle",
           f"max abs err {worst:.2e} over c∈{{0.01..20}}, k∈{{1,3}} in {elapsed:.1f}s")


# ------------------------------------------------------------------ 2

def test_criterion_02_posterior_oracle():
    # part 1: explicit two-branch densities on random instances
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(30):
        k = int(rng.integers(1, 4))
        fi, fj = rng.standard_normal((2, k))
        c = rng.random(k) * 4 + 0.1
        p = float(rng.uniform(0.05, 0.95))
        z1 = np.prod((1.0 + 2.0 * c) ** -0.5)  # E[exp(energy)] in closed form
        on_branch = p * np.exp(mrf.log_pair_energy(fi, fj, c)) / z1
        off_branch = 1.0 - p
        got = float(mrf.posterior_logodds(fi, fj, c, p))
        worst = max(worst, abs(got - np.log(on_branch / off_branch)))
    assert worst < 1e-10

    # part 2: brute-force enumeration of the 8 switch states of a triangle
    rng = np.random.default_rng(12)
    f = rng.standard_normal((3, 2))
    edges = [(0, 1), (1, 2), (0, 2)]
    cs = [rng.random(2) * 3 + 0.1 for _ in edges]
    ps = [float(rng.uniform(0.1, 0.9)) for _ in edges]

    def branch_weight(e, w):
        i, j = edges[e]
        if w == 0:
            return 1.0 - ps[e]
        return ps[e] * np.exp(
            mrf.log_znorm_ratio(cs[e]) + mrf.log_pair_energy(f[i], f[j], cs[e])
        )

    worst_tri = 0.0
    for e in range(3):
        num = den = 0.0
        for state in range(8):
            ws = [(state >> b) & 1 for b in range(3)]
            weight = np.prod([branch_weight(b, ws[b]) for b in range(3)])
            if ws[e]:
                num += weight
            else:
                den += weight
        i, j = edges[e]
        got = float(mrf.posterior_logodds(f[i], f[j], cs[e], ps[e]))
        worst_tri = max(worst_tri, abs(got - np.log(num / den)))
    assert worst_tri < 1e-10
    report(2, "posterior oracle",
           f"two-branch err {worst:.1e}, triangle enumeration err {worst_tri:.1e}")


# ------------------------------------------------------------------ 3

def test_criterion_03_prior_calibration():
    worst = 0.0
    for p in (0.1, 0.5, 0.9):
        for c in (0.5, 2.0):
            scale = p * math.exp(float(mrf.log_znorm_ratio([c])))
            val, err = integrate.dblquad(
                lambda y, x, c=c: _NORM ** 2
                * math.exp(-0.5 * (x * x + y * y) - 0.5 * c * (x - y) ** 2),
                -8.0, 8.0, -8.0, 8.0, epsabs=1e-8, epsrel=1e-8,
            )
            assert err < 1e-6
            worst = max(worst, abs(scale * val - p))
    assert worst < 1e-4

    # a k=2 pair: the 4-D integral factorizes into two 2-D quadratures
    p, c = 0.5, np.array([0.5, 2.0])
    scale = p * math.exp(float(mrf.log_znorm_ratio(c)))
    product = 1.0
    for cl in c:
        val, _ = integrate.dblquad(
            lambda y, x, cl=cl: _NORM ** 2
            * math.exp(-0.5 * (x * x + y * y) - 0.5 * cl * (x - y) ** 2),
            -8.0, 8.0, -8.0, 8.0, epsabs=1e-8, epsrel=1e-8,
        )
        product *= val
    worst = max(worst, abs(scale * product - p))
    assert worst < 1e-4
    report(3, "prior calibration",
           f"max |marginal - p| {worst:.2e} over p∈{{0.1,0.5,0.9}}, c∈{{0.5,2}} and a k=2 case")


# ------------------------------------------------------------------ 4

def _op_instances():
    """One (name, build) pair per differentiable op; build(rng) -> (f, point).

    Each op's output is reduced to a scalar through a fixed random linear
    functional so nothing about the probe is degenerate (a plain sum of
    squares turns ``normalize_per_channel`` into a constant, for example).
    """

    def reduced(op, rng, pts, **kwargs):
        probe = op(*[ad.Variable(p) for p in pts], **kwargs)
        weights = rng.standard_normal(probe.value.shape) + 0.25
        return lambda vs: ad.vsum(ad.multiply(op(*vs, **kwargs), weights)), pts

    def simple(op, n_args=1, positive=False, away_from_zero=False):
        def build(rng):
            shape = tuple(rng.integers(2, 4, size=2))
            pts = []
            for _ in range(n_args):
                x = rng.standard_normal(shape)
                if positive:
                    x = np.abs(x) + 0.5
                if away_from_zero:
                    x = np.where(np.abs(x) < 0.1, x + 0.3, x)
                pts.append(x)
            return reduced(op, rng, pts)
        return build

    def build_logsumexp(rng):
        x = rng.standard_normal((3, 4))
        return reduced(ad.logsumexp, rng, [x], axis=1)

    def build_reductions(rng):
        x = rng.standard_normal((2, 3))
        w = rng.standard_normal(3) + 0.25
        return (
            lambda vs: ad.add(ad.vsum(ad.multiply(ad.vmean(vs[0], axis=0), w)),
                              ad.vsum(vs[0], axis=None)),
            [x],
        )

    def build_pow(rng):
        x = np.abs(rng.standard_normal((2, 3))) + 0.5
        p = float(rng.uniform(0.5, 3.0))
        return reduced(ad.pow_const, rng, [x], p=p)

    def build_reshape(rng):
        x = rng.standard_normal((2, 6))
        return reduced(ad.reshape, rng, [x], shape=(3, 4))

    def build_getitem(rng):
        x = rng.standard_normal((4, 5))
        return reduced(ad.getitem, rng, [x], idx=(slice(1, 3), slice(0, 4)))

    def build_concat(rng):
        a, b = rng.standard_normal((2, 2, 3))
        return reduced(lambda *vs: ad.concat(vs, axis=1), rng, [a, b])

    def build_take_columns(rng):
        x = rng.standard_normal((3, 6))
        idx = rng.integers(0, 6, size=8)  # duplicates exercise accumulation
        return reduced(ad.take_columns, rng, [x], indices=idx)

    def build_pad_reflect(rng):
        x = rng.standard_normal((2, 4, 5))
        return reduced(ad.pad_reflect, rng, [x], pads=(1, 2, 2, 1))

    def build_conv2d(rng):
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3)) * 0.4
        stride = (1, 1) if rng.random() < 0.5 else (2, 2)
        padding = "valid" if rng.random() < 0.5 else "reflect-same"
        return reduced(ad.conv2d, rng, [x, w], stride=stride, padding=padding)

    def build_normalize(rng):
        x = rng.standard_normal((2, 4, 4)) * 2 + 1
        return reduced(ad.normalize_per_channel, rng, [x])

    def build_inject_noise(rng):
        x = rng.standard_normal((2, 3, 3))
        alpha = float(rng.uniform(0.05, 0.5))
        seed = int(rng.integers(1 << 30))
        # a fresh generator per call keeps the graph a deterministic function
        return reduced(
            lambda v: ad.inject_noise(v, alpha, np.random.default_rng(seed)), rng, [x]
        )

    return [
        ("add", simple(ad.add, 2)),
        ("subtract", simple(ad.subtract, 2)),
        ("multiply", simple(ad.multiply, 2)),
        ("negative", simple(ad.negative)),
        ("exp", simple(ad.exp)),
        ("log", simple(ad.log, positive=True)),
        ("log1p", simple(ad.log1p, positive=True)),
        ("softplus", simple(ad.softplus)),
        ("logaddexp", simple(ad.logaddexp, 2)),
        ("logsumexp", build_logsumexp),
        ("vsum/vmean", build_reductions),
        ("square", simple(ad.square)),
        ("pow_const", build_pow),
        ("reshape", build_reshape),
        ("getitem", build_getitem),
        ("concat", build_concat),
        ("take_columns", build_take_columns),
        ("pad_reflect", build_pad_reflect),
        ("conv2d", build_conv2d),
        ("relu", simple(ad.relu, away_from_zero=True)),
        ("normalize_per_channel", build_normalize),
        ("inject_noise", build_inject_noise),
    ]


def _loss_instance(loss_name, seed):
    spec = mrf.NeighborhoodSpec.standard(4)
    rng = np.random.default_rng(seed)
    k = 2
    f0, f1 = rng.standard_normal((2, k, 4, 4))
    lc0, lc1 = rng.standard_normal((2, k)) * 0.3
    lp0, lp1 = rng.standard_normal(2) * 0.4
    point = [f0, f1, lc0, np.asarray(lp0), lc1, np.asarray(lp1)]

    def params_from(vs):
        params = mrf.CouplingParams(spec, channels=k)
        params.couplings[(0, 1)] = mrf.OffsetCoupling(log_c=vs[2], logit_p=vs[3])
        params.couplings[(1, 0)] = mrf.OffsetCoupling(log_c=vs[4], logit_p=vs[5])
        return params

    if loss_name == "position":
        targets, _ = losses.position_targets([(k, 4, 4), (k, 4, 4)], spec)
        negatives = [losses._negative_matrix(32, targets, 4,
                                             np.random.default_rng(1000 + seed))]
        return (
            lambda vs: losses.position_loss_graph([vs[0], vs[1]], spec,
                                                  params_from(vs), negatives),
            point,
        )
    perm = np.random.default_rng(2000 + seed).permutation(32)
    return (
        lambda vs: losses.factor_loss_graph([vs[0], vs[1]], spec, params_from(vs), perm),
        point,
    )


def test_criterion_04_gradient_suite():
    started = time.time()
    worst = {}
    for name, builder in _op_instances():
        rng = np.random.default_rng(abs(hash(name)) % (1 << 32))
        errs = [ad.grad_check(*builder(rng)) for _ in range(20)]
        worst[name] = max(errs)
    for loss_name in ("position", "factor"):
        errs = [ad.grad_check(*_loss_instance(loss_name, 500 + i)) for i in range(20)]
        worst[f"{loss_name}_loss"] = max(errs)
    elapsed = time.time() - started
    overall = max(worst.values())
    assert overall < 1e-4, f"worst offenders: {sorted(worst.items(), key=lambda kv: -kv[1])[:3]}"
    assert elapsed < 60.0
    report(4, "gradient suite",
           f"{len(worst)} cases x 20 instances, max rel err {overall:.2e} in {elapsed:.1f}s")


# ------------------------------------------------------------------ 5

def test_criterion_05_accumulation_equivalence():
    rng = np.random.default_rng(21)
    spec = mrf.NeighborhoodSpec.standard(4)
    arrays = [rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))]
    cfg = losses.NegativeSamplingConfig(mode="position", negatives=6, repetitions=4, seed=77)

    results = {}
    for accumulate in (True, False):
        params = randomized_params(spec, 2, seed=22)
        feats = feature_vars(arrays, requires_grad=True)
        sampling_rng = np.random.default_rng(77)
        loss = losses.position_loss(feats, spec, params, cfg, rng=sampling_rng,
                                    accumulate=accumulate)
        results[accumulate] = (
            loss,
            [f.grad.copy() for f in feats],
            {n: v.grad.copy() for n, v in params.named_params().items()},
        )

    loss_acc, feat_acc, mrf_acc = results[True]
    loss_direct, feat_direct, mrf_direct = results[False]
    worst = abs(loss_acc - loss_direct) / max(abs(loss_direct), 1e-300)
    for a, d in zip(feat_acc, feat_direct):
        np.testing.assert_allclose(a, d, rtol=1e-6, atol=1e-12)
        denom = np.maximum(np.abs(d), 1e-12)
        worst = max(worst, float((np.abs(a - d) / denom).max()))
    for name in mrf_acc:
        np.testing.assert_allclose(mrf_acc[name], mrf_direct[name], rtol=1e-6, atol=1e-12)
    assert any(np.any(g != 0.0) for g in feat_acc), "test is vacuous without gradients"
    assert worst < 1e-6
    report(5, "accumulation equivalence",
           f"4x4 map, 2-image batch: max rel err {worst:.2e}")


# ------------------------------------------------------------------ 6

def test_criterion_06_closed_form_loss_values():
    spec = mrf.NeighborhoodSpec.standard(4)
    for m in (1, 9, 99):
        params = mrf.CouplingParams(spec, channels=1)
        shapes = [np.full((1, 3, 3), 0.25)]
        if m + 1 > 9:
            shapes.append(np.full((1, 1, m + 1 - 9), 0.25))
        cfg = losses.NegativeSamplingConfig(mode="position", negatives=m,
                                            repetitions=1, seed=5)
        pos = losses.position_loss(feature_vars(shapes), spec, params, cfg)
        assert pos == np.log(m + 1), f"position loss at m={m}"

        fac = losses.factor_loss(
            feature_vars([np.full((1, 1, m + 2), 0.5)]), spec, params,
            np.random.default_rng(31),
        )
        assert fac == np.log(m + 1), f"factor loss at m={m}"
    report(6, "closed-form loss values", "both losses equal log(m+1) exactly, m∈{1,9,99}")


# ------------------------------------------------------------------ 7

def random_connected_affinity(rng):
    """Random spanning tree plus extra edges; every node touched, one component."""
    n = int(rng.integers(40, 401))
    tree_rows = np.array([int(rng.integers(0, i)) for i in range(1, n)])
    tree_cols = np.arange(1, n)
    extra_rows = rng.integers(0, n, size=2 * n)
    extra_cols = rng.integers(0, n, size=2 * n)
    keep = extra_rows != extra_cols
    rows = np.concatenate([tree_rows, extra_rows[keep]])
    cols = np.concatenate([tree_cols, extra_cols[keep]])
    weights = rng.uniform(0.1, 2.0, size=rows.size)
    return segment.SparseAffinity(height=n, width=1, rows=rows, cols=cols,
                                  weights=weights)


def test_criterion_07_eigensolver_equivalence():
    rng = np.random.default_rng(7)
    worst_value = worst_angle = 0.0
    sizes = []
    for _ in range(50):
        aff = random_connected_affinity(rng)
        sizes.append(aff.node_count)
        lap = segment.graph_laplacian(aff)
        vals, vecs = segment.smallest_eigenvectors(lap, 17)
        dense_vals, dense_vecs = scipy.linalg.eigh(lap.toarray())
        worst_value = max(worst_value, float(np.abs(vals - dense_vals[:17]).max()))
        angle = scipy.linalg.subspace_angles(vecs, dense_vecs[:, :17]).max()
        worst_angle = max(worst_angle, float(angle))
    assert min(sizes) >= 40 and max(sizes) <= 400
    assert worst_value < 1e-6
    assert worst_angle < 1e-4
    report(7, "eigensolver equivalence",
           f"50 graphs, {min(sizes)}-{max(sizes)} nodes: "
           f"eigenvalue err {worst_value:.1e}, subspace angle {worst_angle:.1e} rad")


# ------------------------------------------------------------------ 8

@pytest.fixture(scope="module")
def two_region_run(tmp_path_factory):
    corpus = tmp_path_factory.mktemp("two-region-corpus")
    synthetic.write_two_region_corpus(corpus, 64, shape=(32, 32), seed=21)
    out = tmp_path_factory.mktemp("two-region-train")
    started = time.time()
    config = models.ModelConfig(architecture="pixel", neighborhood=4, loss="factor")
    settings = optim.TrainSettings(epochs=100, batch_size=8, crop=(32, 32),
                                   seed=0, workers=1, max_steps=500)
    result = optim.train(config, corpus, out, settings)
    return result.model, time.time() - started


def test_criterion_08_end_to_end_synthetic_smoke(two_region_run):
    model, train_seconds = two_region_run
    started = time.time()
    head = model.config.head_layers[0]
    within, across = [], []
    curves = []
    for i in range(12):
        sample = synthetic.two_region_sample((32, 32), np.random.default_rng([99, i]))
        fm = model.forward(sample.pixels)[0]
        cm = mrf.connectivity_map(fm, model.spec, model.heads[head])
        for off in cm.offsets:
            rows, cols = mrf.valid_block(off, (cm.height, cm.width))
            lo = cm.logodds[off][rows, cols]
            li = sample.labels[rows, cols]
            lj = sample.labels[rows.start + off[0]: rows.stop + off[0],
                               cols.start + off[1]: cols.stop + off[1]]
            same = li == lj
            within.append(lo[same])
            across.append(lo[~same])
        # two regions -> the first two eigenvectors carry the partition
        contour = segment.contours(fm, model.spec, model.heads[head], count=2)
        curves.append(bench.pr_curve(contour, [sample.boundary],
                                     max_dist_frac=TWO_PX_AT_32))
    margin = float(np.concatenate(within).mean() - np.concatenate(across).mean())
    score = bench.summarize(curves)
    total = train_seconds + (time.time() - started)
    assert margin > 2.0, f"margin {margin:.2f} nats"
    assert score.f_ods > 0.9, f"ODS-F {score.f_ods:.4f}"
    assert total < 120.0
    report(8, "end-to-end synthetic smoke",
           f"pixel/4-neighborhood/factor, 500 steps: margin {margin:.2f} nats, "
           f"ODS-F {score.f_ods:.4f} (OIS {score.f_ois:.4f}, AP {score.average_precision:.4f}) "
           f"in {total:.1f}s single-thread")


# ------------------------------------------------------------------ 9

def test_criterion_09_benchmark_self_consistency():
    rng = np.random.default_rng(9)

    # prediction identical to ground truth scores perfectly
    curves = []
    for _ in range(3):
        gt = np.zeros((32, 32), dtype=bool)
        gt[int(rng.integers(4, 28)), :] = True
        gt[:, int(rng.integers(4, 28))] = True
        curves.append(bench.pr_curve(gt.astype(float), [gt]))
    perfect = bench.summarize(curves)
    assert perfect.f_ods == 1.0 and perfect.f_ois == 1.0
    assert abs(perfect.average_precision - 1.0) < 1e-12

    # one-pixel shift is a full match at two-pixel tolerance
    gt = np.zeros((32, 32), dtype=bool)
    gt[16, :] = True
    shifted = np.zeros((32, 32))
    shifted[17, :] = 1.0
    curve = bench.pr_curve(shifted, [gt], max_dist_frac=TWO_PX_AT_32)
    assert float(curve.f_measure.max()) == 1.0

    # OIS dominates ODS on any multi-image fixture
    checked = 0
    for fixture in range(10):
        fixture_rng = np.random.default_rng(900 + fixture)
        curves = []
        for _ in range(4):
            gt = np.zeros((24, 24), dtype=bool)
            gt[int(fixture_rng.integers(2, 22)), :] = True
            pred = np.clip(
                gt * fixture_rng.uniform(0.3, 1.0)
                + fixture_rng.uniform(0.0, 0.35, size=gt.shape),
                0.0, 1.0,
            )
            curves.append(bench.pr_curve(pred, [gt]))
        result = bench.summarize(curves)
        assert result.f_ois >= result.f_ods - 1e-12, f"fixture {fixture}"
        checked += 1
    report(9, "benchmark self-consistency",
           f"identity -> all 1.0; 1px shift @ 2px tolerance -> F 1.0; "
           f"OIS >= ODS on {checked} random multi-image fixtures")


# ------------------------------------------------------------------ 10

def test_criterion_10_determinism(tmp_path):
    corpus = tmp_path / "corpus"
    synthetic.write_two_region_corpus(corpus, 10, shape=(32, 32), seed=4)
    config = {
        "schema_version": 1,
        "architecture": "pixel",
        "loss": "factor",
        "corpus": str(corpus),
        "out": str(tmp_path / "a"),
        "epochs": 4,
        "batch_size": 4,
        "crop": [32, 32],
        "seed": 123,
    }
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps(config))
    assert cli_main(["train", "--config", str(config_path)]) == 0
    assert cli_main(["train", "--config", str(config_path),
                     "--out", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    second = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert first == second
    steps = len(first.splitlines()) - 1  # 10 images / batch 4 -> 3 steps/epoch
    assert steps == 12
    report(10, "determinism",
           f"two cmd_train runs, same config+seed: metrics.csv byte-identical "
           f"({len(first)} bytes, {steps} steps)")


# ------------------------------------------------------------------ 11

def test_criterion_11_long_run_smoke():
    pytest.skip(
        "criterion 11 [long-run smoke]: REPORTED, NOT RUN — non-binding by design. "
        "Requires a ≥1000-image natural-image corpus and ≥20 boundary-annotated "
        "evaluation images; neither ships with this repository. The published "
        "reference for the pixel model is ODS-F 0.69 (OIS 0.73 AP 0.73 under the "
        "same protocol), so a compliant run must land ODS-F ≥ 0.54. To execute: "
        "train with `predseg train --config <cfg>` (pixel/4-neighborhood, ≥1 "
        "epoch), extract with `predseg contours`, then score with `predseg eval` "
        "against the annotation index."
    )
