"""Command-line entry point: train models, compute connectivity and contours,
run the boundary benchmark, and plot precision-recall curves.

Verbs
-----
train         fit a model from a JSON run config; writes checkpoints + CSV logs
connectivity  posterior log-odds maps for images under a trained checkpoint
contours      globalized contour maps (PNG + PSTF) per image per head
eval          score a directory of contour maps against boundary annotations
pr-plot       render one or more PR CSV files into a single SVG figure

Exit codes: 0 success, 2 missing or invalid inputs (the message names the
offending path or key), 3 unloadable/corrupted checkpoint. Set the
``PREDSEG_LOG`` environment variable (DEBUG/INFO/WARNING/ERROR) for verbosity.

Run configs are JSON with a versioned schema; unknown keys are rejected so a
typo cannot silently fall back to a default::

    {
      "schema_version": 1,
      "architecture": "pixel",          // pixel | linear | predseg1
      "corpus": "data/train",           // directory of PNG/JPEG images
      "out": "runs/pixel-a",            // output directory
      "neighborhood": 4,                // 4 | 8 | 12 | 20
      "alpha": 0.0,                     // feature-noise level in [0, 1]
      "loss": "factor",                 // factor | position
      "head_layers": [0],               // optional; defaults per architecture
      "epochs": 10,
      "batch_size": 8,
      "crop": [256, 256],
      "optimizer": {"lr": 0.001, "momentum": 0.9, "weight_decay": 0.0001},
      "negatives": 10,
      "repetitions": null,              // null: 5 for pixel, 10 otherwise
      "seed": 0,
      "max_steps": null,
      "time_budget": null               // wall-clock seconds
    }
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bench, models, optim, plot, segment
from . import io as pio
from . import mrf

__all__ = ["CliError", "RunConfig", "load_run_config", "main"]

log = logging.getLogger("predseg.cli")

_TOP_KEYS = {
    "schema_version", "architecture", "neighborhood", "alpha", "loss",
    "head_layers", "corpus", "out", "epochs", "batch_size", "crop",
    "optimizer", "negatives", "repetitions", "seed", "max_steps",
    "time_budget",
}
_OPTIMIZER_KEYS = {"lr", "momentum", "weight_decay"}


class CliError(Exception):
    """A user-facing failure with a chosen process exit code."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """A fully validated training run: what to train, on what, and where."""

    model: models.ModelConfig
    settings: optim.TrainSettings
    corpus: Path
    out: Path


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"config {path} is not readable JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must be a JSON object")

    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise CliError(f"config {path}: unknown keys {unknown}")
    if doc.get("schema_version") != 1:
        raise CliError(
            f"config {path}: schema_version must be 1, got {doc.get('schema_version')!r}"
        )
    for key in ("architecture", "corpus", "out"):
        if key not in doc:
            raise CliError(f"config {path}: missing required key {key!r}")

    optimizer = doc.get("optimizer", {})
    if not isinstance(optimizer, dict):
        raise CliError(f"config {path}: optimizer must be an object")
    bad = sorted(set(optimizer) - _OPTIMIZER_KEYS)
    if bad:
        raise CliError(f"config {path}: unknown optimizer keys {bad}")

    try:
        model = models.ModelConfig(
            architecture=doc["architecture"],
            neighborhood=int(doc.get("neighborhood", 4)),
            alpha=float(doc.get("alpha", 0.0)),
            loss=doc.get("loss", "factor"),
            head_layers=tuple(doc.get("head_layers") or ()),
        )
        crop = doc.get("crop", [256, 256])
        if not (isinstance(crop, (list, tuple)) and len(crop) == 2):
            raise ValueError(f"crop must be a [height, width] pair, got {crop!r}")
        settings = optim.TrainSettings(
            epochs=int(doc.get("epochs", 10)),
            batch_size=int(doc.get("batch_size", 8)),
            crop=(int(crop[0]), int(crop[1])),
            lr=float(optimizer.get("lr", 0.001)),
            momentum=float(optimizer.get("momentum", 0.9)),
            weight_decay=float(optimizer.get("weight_decay", 0.0001)),
            negatives=int(doc.get("negatives", 10)),
            repetitions=None if doc.get("repetitions") is None else int(doc["repetitions"]),
            seed=int(doc.get("seed", 0)),
            max_steps=None if doc.get("max_steps") is None else int(doc["max_steps"]),
            time_budget=None if doc.get("time_budget") is None else float(doc["time_budget"]),
        )
    except (TypeError, ValueError) as exc:
        raise CliError(f"config {path}: {exc}") from exc
    return RunConfig(
        model=model, settings=settings, corpus=Path(doc["corpus"]), out=Path(doc["out"])
    )


def _load_model(checkpoint) -> models.Model:
    path = Path(checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    model, state = models.load_checkpoint(path)  # CheckpointError -> exit 3 in main
    log.debug("loaded checkpoint %s (state %s)", path, state)
    return model


def _input_images(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        paths = pio.list_images(p)
        if not paths:
            raise CliError(f"no images found in {p}")
        return paths
    if p.is_file():
        return [p]
    raise CliError(f"image path not found: {p}")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.settings.seed = args.seed
    if args.threads is not None:
        cfg.settings.workers = args.threads
    out = Path(args.out) if args.out else cfg.out
    if not cfg.corpus.is_dir():
        raise CliError(f"corpus directory not found: {cfg.corpus}")
    log.info("training %s on %s -> %s", cfg.model.architecture, cfg.corpus, out)
    result = optim.train(cfg.model, cfg.corpus, out, cfg.settings)
    print(
        f"trained {cfg.model.architecture}: {result.steps} steps, "
        f"{result.epochs_completed} epochs ({result.stop_reason}); outputs in {out}"
    )
    return 0


def cmd_connectivity(args) -> int:
    model = _load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in _input_images(args.images):
        sample = pio.load_image(image_path)
        for fm in model.forward(sample.pixels):
            target = out / f"{image_path.stem}.head{fm.layer_id}"
            cm = mrf.connectivity_map(fm, model.spec, model.heads[fm.layer_id])
            cm.save(target)
            log.info("wrote %s", target)
    return 0


def cmd_contours(args) -> int:
    model = _load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in _input_images(args.images):
        sample = pio.load_image(image_path)
        full_shape = sample.pixels.shape[1:]
        for fm in model.forward(sample.pixels):
            contour = segment.contours(
                fm, model.spec, model.heads[fm.layer_id],
                count=args.eigenvectors, output_shape=full_shape,
            )
            stem = f"{image_path.stem}.head{fm.layer_id}"
            pio.write_contour_png(contour.values, out / f"{stem}.png")
            pio.write_tensor(contour.values, out / f"{stem}.pstf")
            log.info("wrote %s.{png,pstf}", out / stem)
    return 0


def _find_contour_file(directory: Path, image_id: str, head: int) -> Path | None:
    # prefer the lossless tensor; fall back to the quantized PNG
    for name in (
        f"{image_id}.head{head}.pstf",
        f"{image_id}.head{head}.png",
        f"{image_id}.pstf",
        f"{image_id}.png",
    ):
        candidate = directory / name
        if candidate.is_file():
            return candidate
    return None


def cmd_eval(args) -> int:
    contour_dir = Path(args.contours)
    if not contour_dir.is_dir():
        raise CliError(f"contour directory not found: {contour_dir}")
    try:
        gt = bench.GroundTruth.load(args.gt)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc

    found: dict[str, Path] = {}
    missing = []
    for image_id in sorted(gt.images):
        path = _find_contour_file(contour_dir, image_id, args.head)
        if path is None:
            missing.append(image_id)
        else:
            found[image_id] = path
    if not found:
        raise CliError(f"no contour maps found in {contour_dir}")
    if missing:
        raise CliError(f"contour maps missing in {contour_dir} for: {', '.join(missing)}")

    curves = []
    for image_id, path in found.items():
        if path.suffix == ".pstf":
            values = pio.read_tensor(path)
        else:
            values = pio.read_contour_png(path)
        curves.append(
            bench.pr_curve(values, gt.images[image_id],
                           count=args.thresholds, max_dist_frac=args.tolerance)
        )
    result = bench.summarize(curves)
    pooled = bench.pool(curves)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pr.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "f"])
        f_values = pooled.f_measure
        for i, t in enumerate(pooled.thresholds):
            writer.writerow([
                f"{t:.6f}", f"{pooled.precision[i]:.6f}",
                f"{pooled.recall[i]:.6f}", f"{f_values[i]:.6f}",
            ])
    report = dict(result.to_dict())
    report.update({
        "schema_version": 1,
        "head": args.head,
        "tolerance": args.tolerance,
        "thresholds": args.thresholds,
        "images": len(curves),
    })
    (out / "result.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    label = contour_dir.name or "run"
    plot.write_pr_plot([(label, pooled.recall, pooled.precision)], out / "pr.svg")
    print(
        f"F_ODS {result.f_ods:.4f} (t={result.ods_threshold:.4f})  "
        f"F_OIS {result.f_ois:.4f}  AP {result.average_precision:.4f}  "
        f"[{len(curves)} images]"
    )
    return 0


def _read_pr_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "precision" not in rows[0] or "recall" not in rows[0]:
        raise CliError(f"{path}: expected a PR CSV with precision and recall columns")
    recall = np.array([float(r["recall"]) for r in rows])
    precision = np.array([float(r["precision"]) for r in rows])
    return recall, precision


def cmd_pr_plot(args) -> int:
    series = []
    for csv_path in args.csvs:
        p = Path(csv_path)
        if not p.is_file():
            raise CliError(f"PR csv not found: {p}")
        recall, precision = _read_pr_csv(p)
        label = p.parent.name if p.stem == "pr" else p.stem
        series.append((label, recall, precision))
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    plot.write_pr_plot(series, out, title=args.title)
    print(f"wrote {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="predseg",
        description="Unsupervised connectivity models: train, extract contours, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True, help="path to the run-config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the config output directory")
    p.add_argument("--threads", type=int, default=None, help="cap data-loading workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("connectivity", help="write per-offset log-odds maps per image per head")
    p.add_argument("checkpoint", help="checkpoint directory written by train")
    p.add_argument("images", help="an image file or a directory of images")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_connectivity)

    p = sub.add_parser("contours", help="write contour PNG + PSTF per image per head")
    p.add_argument("checkpoint", help="checkpoint directory written by train")
    p.add_argument("images", help="an image file or a directory of images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--eigenvectors", type=int, default=segment.EIGENVECTOR_COUNT,
                   help="number of Laplacian eigenvectors to globalize over")
    p.set_defaults(func=cmd_contours)

    p = sub.add_parser("eval", help="score contour maps against boundary annotations")
    p.add_argument("contours", help="directory of contour maps (PSTF or PNG)")
    p.add_argument("--gt", required=True, help="ground-truth directory with index.json")
    p.add_argument("--out", required=True, help="output directory for pr.csv/result.json/pr.svg")
    p.add_argument("--head", type=int, default=0, help="which model head's maps to score")
    p.add_argument("--tolerance", type=float, default=bench.DEFAULT_MAX_DIST_FRAC,
                   help="match tolerance as a fraction of the image diagonal")
    p.add_argument("--thresholds", type=int, default=bench.DEFAULT_THRESHOLD_COUNT,
                   help="number of binarization thresholds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pr-plot", help="plot one or more PR CSV files as SVG")
    p.add_argument("csvs", nargs="+", help="pr.csv files written by eval")
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("--title", default="Precision-recall", help="plot title")
    p.set_defaults(func=cmd_pr_plot)
    return parser


def _configure_logging() -> None:
    name = os.environ.get("PREDSEG_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("predseg").setLevel(level)


def main(argv=None) -> int:
    _configure_logging()
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except models.CheckpointError as exc:
        print(f"error: corrupted checkpoint: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
