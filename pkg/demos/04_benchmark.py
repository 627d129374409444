"""The boundary benchmark: matched precision/recall, ODS/OIS, and the plot.

Scoring a soft contour map against human annotations takes more care than
pixel overlap: predictions are swept over thresholds, thinned to one-pixel
curves, and matched one-to-one against each annotator within a distance
tolerance. This script builds a tiny dataset with two annotators and three
predictors of different quality, then walks through the numbers:

    python3 demos/04_benchmark.py

Outputs land in demos/output/bench/.
"""

from pathlib import Path

import numpy as np

from predseg import bench, plot

out = Path(__file__).parent / "output" / "bench"
out.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(11)

SHAPE = (48, 48)
TWO_PX = 2.0 / float(np.hypot(*SHAPE))


def make_image(row):
    """One image: a horizontal boundary, two annotators who disagree by 1px."""
    ann0 = np.zeros(SHAPE, dtype=bool)
    ann0[row, :] = True
    ann1 = np.zeros(SHAPE, dtype=bool)
    ann1[row + 1, :] = True
    return [ann0, ann1]


def predictor(gt_row, quality):
    """A soft contour map whose usefulness scales with `quality`.

    The boundary is marked at strength `quality` but only on a
    quality-sized fraction of its pixels (a recall ceiling), and every
    predictor shares a fixed-strength distractor line (a precision tax
    that only the confident predictors can threshold away).
    """
    pred = rng.uniform(0.0, 0.25, SHAPE)          # low-level noise everywhere
    pred[gt_row, rng.random(SHAPE[1]) < quality] = quality
    distractor_row = (gt_row + SHAPE[0] // 2) % (SHAPE[0] - 8) + 4
    pred[distractor_row, :] = 0.55
    return np.clip(pred, 0.0, 1.0)


gt = bench.GroundTruth()
rows = [12, 24, 36]
for i, row in enumerate(rows):
    gt.images[f"img{i}"] = make_image(row)
gt.save(out / "gt")
print(f"3 images, 2 annotators each, saved under {out / 'gt'}")
print()

print("== one image, one threshold sweep ==")
curve = bench.pr_curve(predictor(rows[0], 0.9), gt.images["img0"],
                       max_dist_frac=TWO_PX)
f = curve.f_measure
best = int(f.argmax())
print(f"{'threshold':>10}{'precision':>11}{'recall':>9}{'F':>8}")
for i in range(0, len(curve.thresholds), 8):
    marker = "  <- best" if i == best else ""
    print(f"{curve.thresholds[i]:>10.3f}{curve.precision[i]:>11.3f}"
          f"{curve.recall[i]:>9.3f}{f[i]:>8.3f}{marker}")
print("High thresholds keep only the confident boundary (precise, low recall);")
print("low ones sweep in the clutter. Matching uses a 2-pixel tolerance and")
print("counts a prediction once even when both annotators claim it.")
print()

print("== three predictors on the full set ==")
print(f"{'predictor':<12}{'ODS-F':>8}{'OIS-F':>8}{'AP':>8}")
series = []
for name, quality in [("sharp", 0.95), ("medium", 0.7), ("weak", 0.45)]:
    curves = [
        bench.pr_curve(predictor(row, quality), gt.images[f"img{i}"],
                       max_dist_frac=TWO_PX)
        for i, row in enumerate(rows)
    ]
    result = bench.summarize(curves)
    pooled = bench.pool(curves)
    series.append((name, pooled.recall, pooled.precision))
    print(f"{name:<12}{result.f_ods:>8.3f}{result.f_ois:>8.3f}"
          f"{result.average_precision:>8.3f}")
print()
print("OIS lets every image pick its own threshold, which normally beats the")
print("shared ODS threshold. (It aggregates per-image-best *counts*, though,")
print("so on tiny degenerate sets it can land a whisker below ODS — the weak")
print("predictor above is exactly such a case.)")

plot.write_pr_plot(series, out / "pr.svg", title="Three predictors")
print(f"PR curves plotted to {out / 'pr.svg'}")
print()
print("CLI equivalent: `predseg eval <contour-dir> --gt <gt-dir> --out <dir>`")
print("then `predseg pr-plot <dir>/pr.csv --out curves.svg` to overlay runs.")
