"""Momentum SGD and the seeded, budgeted training loop.

The update is the classic recurrence

    g <- grad + wd * param        (decay only for groups that opted in)
    v <- momentum * v + g
    param <- param - lr * multiplier * v

applied group by group, with gradients zeroed afterwards. Training writes
three artifacts under the output directory: ``metrics.csv`` (step, epoch,
loss — deliberately free of wall-clock times so same-seed runs are
byte-identical), ``timing.csv`` (per-step wall time, best effort), and
``run.json`` (all hyperparameters, the corpus digest, and how the run
ended), plus one checkpoint directory per completed epoch and a ``final``
checkpoint at whatever point the budget ran out.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as contrastive
from . import models
from ._util import STREAM_NEGATIVES, STREAM_NOISE, STREAM_SHUFFLE, rng_for
from .io import CropDataset, list_images

__all__ = ["SgdState", "sgd_step", "TrainSettings", "TrainResult", "train", "corpus_digest"]


@dataclass
class SgdState:
    """Velocity buffers plus the shared optimizer hyperparameters."""

    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    step_count: int = 0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_groups(cls, groups, lr: float = 0.001, momentum: float = 0.9,
                   weight_decay: float = 0.0001) -> "SgdState":
        state = cls(lr=lr, momentum=momentum, weight_decay=weight_decay)
        for group in groups:
            for name, var in group.params.items():
                if name in state.velocities:
                    raise ValueError(f"parameter name {name!r} appears in two groups")
                state.velocities[name] = np.zeros_like(var.value)
        return state


def sgd_step(groups, state: SgdState) -> None:
    """One momentum-SGD update over all groups; gradients are zeroed after."""
    for group in groups:
        for name, var in group.params.items():
            v = state.velocities.get(name)
            if v is None:
                raise ValueError(f"no velocity buffer for parameter {name!r}")
            if v.shape != var.value.shape:
                raise ValueError(
                    f"velocity shape {v.shape} does not match parameter {name!r} "
                    f"shape {var.value.shape}"
                )
            g = var.grad
            if group.weight_decay and state.weight_decay:
                g = g + state.weight_decay * var.value
            v *= state.momentum
            v += g
            var.value -= state.lr * group.lr_multiplier * v
            var.zero_grad()
    state.step_count += 1


@dataclass
class TrainSettings:
    """Everything about a run that is not the model architecture."""

    epochs: int = 10
    batch_size: int = 8
    crop: tuple[int, int] = (256, 256)
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    negatives: int = 10
    repetitions: int | None = None  # None: 5 for the pixel model, 10 otherwise
    seed: int = 0
    workers: int = 1
    max_steps: int | None = None
    time_budget: float | None = None  # wall-clock seconds, checked between steps

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be at least 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be at least 1 when given")
        self.crop = (int(self.crop[0]), int(self.crop[1]))

    def repetitions_for(self, architecture: str) -> int:
        if self.repetitions is not None:
            return self.repetitions
        return 5 if architecture == "pixel" else 10

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "crop": list(self.crop),
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "negatives": self.negatives,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "workers": self.workers,
            "max_steps": self.max_steps,
            "time_budget": self.time_budget,
        }


@dataclass
class TrainResult:
    model: models.Model
    steps: int
    epochs_completed: int
    losses: list[float]
    out_dir: Path
    checkpoints: list[Path]
    stop_reason: str


def corpus_digest(paths) -> str:
    """SHA-256 over file names and contents, in sorted order."""
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(Path(p).name.encode())
        h.update(b"\0")
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _step_loss(model: models.Model, samples, step: int, settings: TrainSettings,
               pos_cfg) -> float:
    """Forward the batch and run the configured loss per head; returns the sum."""
    head_maps = {l: [] for l in model.config.head_layers}
    for i, sample in enumerate(samples):
        noise_rng = None
        if model.config.alpha > 0.0:
            noise_rng = rng_for(settings.seed, STREAM_NOISE, step, i)
        for fm in model.forward(sample.pixels, noise_rng=noise_rng):
            head_maps[fm.layer_id].append(fm)
    total = 0.0
    if model.config.loss == "position":
        rng = rng_for(settings.seed, STREAM_NEGATIVES, step)
        for l in model.config.head_layers:
            total += contrastive.position_loss(
                head_maps[l], model.spec, model.heads[l], pos_cfg, rng=rng
            )
    else:
        rng = rng_for(settings.seed, STREAM_SHUFFLE, step)
        for l in model.config.head_layers:
            total += contrastive.factor_loss(head_maps[l], model.spec, model.heads[l], rng)
    return total


def train(config: models.ModelConfig, corpus_dir, out_dir,
          settings: TrainSettings | None = None) -> TrainResult:
    """Train a model on a directory of images; see the module docstring for outputs."""
    settings = settings or TrainSettings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)

    paths = list_images(corpus_dir)
    dataset = CropDataset(paths, crop=settings.crop, seed=settings.seed,
                          workers=settings.workers)
    model = models.build_model(config, seed=settings.seed)
    groups = model.param_groups()
    state = SgdState.for_groups(groups, lr=settings.lr, momentum=settings.momentum,
                                weight_decay=settings.weight_decay)
    pos_cfg = contrastive.NegativeSamplingConfig(
        mode="position",
        negatives=settings.negatives,
        repetitions=settings.repetitions_for(config.architecture),
        seed=settings.seed,
    )

    started = time.time()
    step = 0
    epochs_completed = 0
    loss_log: list[float] = []
    checkpoints: list[Path] = []
    stop_reason = "epochs"

    def out_of_budget() -> str | None:
        if settings.max_steps is not None and step >= settings.max_steps:
            return "max-steps"
        if settings.time_budget is not None and time.time() - started >= settings.time_budget:
            return "time-budget"
        return None

    def save(name: str) -> None:
        path = out_dir / "checkpoints" / name
        models.save_checkpoint(
            model, path, epoch=epochs_completed,
            run_state={"seed": settings.seed, "step": step, "stop_reason": stop_reason},
        )
        checkpoints.append(path)

    metrics = open(out_dir / "metrics.csv", "w")
    timing = open(out_dir / "timing.csv", "w")
    try:
        metrics.write("step,epoch,loss\n")
        timing.write("step,seconds\n")
        for epoch in range(settings.epochs):
            batch = []
            for sample in dataset.epoch(epoch):
                batch.append(sample)
                if len(batch) < settings.batch_size:
                    continue
                t0 = time.time()
                loss = _step_loss(model, batch, step, settings, pos_cfg)
                sgd_step(groups, state)
                batch = []
                metrics.write(f"{step},{epoch},{loss!r}\n")
                timing.write(f"{step},{time.time() - t0:.6f}\n")
                loss_log.append(loss)
                step += 1
                stop = out_of_budget()
                if stop:
                    stop_reason = stop
                    break
            else:
                if batch:  # leftover images still make a (smaller) step
                    t0 = time.time()
                    loss = _step_loss(model, batch, step, settings, pos_cfg)
                    sgd_step(groups, state)
                    metrics.write(f"{step},{epoch},{loss!r}\n")
                    timing.write(f"{step},{time.time() - t0:.6f}\n")
                    loss_log.append(loss)
                    step += 1
                epochs_completed = epoch + 1
                save(f"epoch{epochs_completed:03d}")
                stop = out_of_budget()
                if stop:
                    stop_reason = stop
                    break
                continue
            break
    finally:
        metrics.close()
        timing.close()

    save("final")
    manifest = {
        "schema_version": 1,
        "config": config.to_dict(),
        "settings": settings.to_dict(),
        "corpus": {
            "path": str(Path(corpus_dir)),
            "files": len(paths),
            "sha256": corpus_digest(paths),
        },
        "result": {
            "steps": step,
            "epochs_completed": epochs_completed,
            "stop_reason": stop_reason,
            "wall_seconds": round(time.time() - started, 3),
        },
        "checkpoints": [p.name for p in checkpoints],
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return TrainResult(
        model=model,
        steps=step,
        epochs_completed=epochs_completed,
        losses=loss_log,
        out_dir=out_dir,
        checkpoints=checkpoints,
        stop_reason=stop_reason,
    )
