"""Feature extractors: raw pixels, one linear conv layer, and a small convnet.

Every architecture ends the same way: the map feeding an MRF head is
per-channel normalized and (optionally) noise-injected. The convnet trunk
itself stays unnormalized; normalization happens on each head's branch.

Checkpoints are directories: ``manifest.json`` describing the architecture,
configuration, neighborhood offsets, and training state, plus one tensor
file per named parameter under ``params/``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as pio
from . import mrf
from ._util import STREAM_INIT, rng_for

__all__ = [
    "LayerSpec",
    "ModelConfig",
    "FeatureMap",
    "Model",
    "build_model",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]

ARCHITECTURES = ("pixel", "linear", "predseg1")

_DEFAULT_LAYERS = {
    "pixel": (),
    "linear": ({"out_channels": 50, "kernel": 11, "stride": 1, "relu": False},),
    "predseg1": (
        {"out_channels": 3, "kernel": 3, "stride": 2, "relu": False},
        {"out_channels": 32, "kernel": 7, "stride": 1, "relu": True},
        {"out_channels": 64, "kernel": 3, "stride": 2, "relu": True},
        {"out_channels": 64, "kernel": 3, "stride": 1, "relu": True},
    ),
}

_DEFAULT_HEADS = {"pixel": (0,), "linear": (0,), "predseg1": (0, 1)}

_MIN_INPUT = {"pixel": 2, "linear": 11, "predseg1": 16}


@dataclass(frozen=True)
class LayerSpec:
    """One convolution of the trunk (reflect-same padding, no bias)."""

    out_channels: int
    kernel: int
    stride: int = 1
    relu: bool = False

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError(f"invalid layer spec {self}")


@dataclass
class ModelConfig:
    """Architecture, neighborhood, and loss selection for one model.

    ``layers`` and ``head_layers`` default per architecture; ``offsets``
    replaces the standard neighborhood offsets when the default geometry
    is not wanted (its size must still match ``neighborhood``).
    """

    architecture: str
    neighborhood: int = 4
    alpha: float = 0.0
    loss: str = "factor"
    head_layers: tuple[int, ...] = ()
    layers: tuple[LayerSpec, ...] = ()
    offsets: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.neighborhood not in (4, 8, 12, 20):
            raise ValueError(f"neighborhood size must be 4, 8, 12 or 20, got {self.neighborhood}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.loss not in ("position", "factor"):
            raise ValueError(f"loss must be 'position' or 'factor', got {self.loss!r}")
        if not self.layers:
            self.layers = tuple(LayerSpec(**d) for d in _DEFAULT_LAYERS[self.architecture])
        else:
            self.layers = tuple(
                l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers
            )
        if self.architecture == "pixel" and self.layers:
            raise ValueError("the pixel model has no layers to configure")
        if self.architecture == "linear":
            if len(self.layers) != 1 or self.layers[0].relu:
                raise ValueError("the linear model is a single conv without nonlinearity")
        if not self.head_layers:
            self.head_layers = _DEFAULT_HEADS[self.architecture]
        else:
            self.head_layers = tuple(int(h) for h in self.head_layers)
        n_layers = max(1, len(self.layers))
        if any(h < 0 or h >= n_layers for h in self.head_layers):
            raise ValueError(f"head layers {self.head_layers} out of range for {n_layers} layers")
        if len(set(self.head_layers)) != len(self.head_layers):
            raise ValueError("duplicate head layers")
        if self.offsets is not None:
            self.offsets = tuple((int(dy), int(dx)) for dy, dx in self.offsets)
            if 2 * len(self.offsets) != self.neighborhood:
                raise ValueError(
                    f"{len(self.offsets)} offsets do not make a {self.neighborhood}-neighborhood"
                )

    def neighborhood_spec(self) -> mrf.NeighborhoodSpec:
        if self.offsets is not None:
            return mrf.NeighborhoodSpec(self.offsets)
        return mrf.NeighborhoodSpec.standard(self.neighborhood)

    def head_channels(self, layer_id: int) -> int:
        if self.architecture == "pixel":
            return 3
        return self.layers[layer_id].out_channels

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "neighborhood": self.neighborhood,
            "alpha": self.alpha,
            "loss": self.loss,
            "head_layers": list(self.head_layers),
            "layers": [
                {
                    "out_channels": l.out_channels,
                    "kernel": l.kernel,
                    "stride": l.stride,
                    "relu": l.relu,
                }
                for l in self.layers
            ],
            "offsets": None if self.offsets is None else [list(o) for o in self.offsets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            architecture=d["architecture"],
            neighborhood=int(d.get("neighborhood", 4)),
            alpha=float(d.get("alpha", 0.0)),
            loss=d.get("loss", "factor"),
            head_layers=tuple(d.get("head_layers") or ()),
            layers=tuple(LayerSpec(**l) for l in d.get("layers") or ()),
            offsets=None
            if d.get("offsets") is None
            else tuple((int(dy), int(dx)) for dy, dx in d["offsets"]),
        )


@dataclass
class FeatureMap:
    """A head's output: normalized (and possibly noised) feature grid."""

    variable: ad.Variable
    layer_id: int
    downsampling: int

    @property
    def values(self) -> np.ndarray:
        return self.variable.value

    @property
    def channels(self) -> int:
        return self.variable.value.shape[0]

    @property
    def height(self) -> int:
        return self.variable.value.shape[1]

    @property
    def width(self) -> int:
        return self.variable.value.shape[2]


class Model:
    """A feature extractor plus one MRF head per configured layer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.spec = config.neighborhood_spec()
        self.weights: dict[str, ad.Variable] = {}
        in_ch = 3
        for i, layer in enumerate(config.layers):
            fan_in = in_ch * layer.kernel * layer.kernel
            bound = 1.0 / math.sqrt(fan_in)
            rng = rng_for(seed, STREAM_INIT, i)
            w = rng.uniform(-bound, bound, (layer.out_channels, in_ch, layer.kernel, layer.kernel))
            self.weights[f"conv{i}.weight"] = ad.Variable(
                w, requires_grad=True, name=f"conv{i}.weight"
            )
            in_ch = layer.out_channels
        self.heads = {
            l: mrf.CouplingParams(self.spec, channels=config.head_channels(l))
            for l in config.head_layers
        }

    def downsampling_factor(self, layer_id: int) -> int:
        factor = 1
        for layer in self.config.layers[: layer_id + 1]:
            factor *= layer.stride
        return factor

    def forward(self, pixels: np.ndarray, noise_rng=None) -> list[FeatureMap]:
        """Run the trunk and return one FeatureMap per head, in head order.

        Feature noise (``alpha``) is a training regularizer: it is injected
        only when a ``noise_rng`` is supplied. Inference callers omit the
        generator and get deterministic features regardless of alpha.
        """
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) input, got {pixels.shape}")
        H, W = pixels.shape[1:]
        min_side = _MIN_INPUT[self.config.architecture]
        if H < min_side or W < min_side:
            raise ValueError(
                f"{self.config.architecture} model needs input of at least "
                f"{min_side}x{min_side}, got {H}x{W}"
            )
        x = ad.Variable(pixels)
        layer_out = {}
        if self.config.architecture == "pixel":
            layer_out[0] = x
        else:
            for i, layer in enumerate(self.config.layers):
                x = ad.conv2d(
                    x,
                    self.weights[f"conv{i}.weight"],
                    stride=(layer.stride, layer.stride),
                    padding="reflect-same",
                )
                if layer.relu:
                    x = ad.relu(x)
                layer_out[i] = x
        maps = []
        for l in self.config.head_layers:
            z = ad.normalize_per_channel(layer_out[l])
            if self.config.alpha > 0.0 and noise_rng is not None:
                z = ad.inject_noise(z, self.config.alpha, noise_rng)
            factor = self.downsampling_factor(l) if self.config.architecture != "pixel" else 1
            h, w = z.value.shape[1:]
            assert h == -(-H // factor) and w == -(-W // factor), (
                f"layer {l}: map {h}x{w} inconsistent with factor {factor} on {H}x{W}"
            )
            maps.append(FeatureMap(variable=z, layer_id=l, downsampling=factor))
        return maps

    def named_params(self) -> dict[str, ad.Variable]:
        out = dict(self.weights)
        for l in sorted(self.heads):
            for name, var in self.heads[l].named_params().items():
                out[f"head{l}.{name}"] = var
        return out

    def param_groups(self) -> list[ad.ParamGroup]:
        groups = []
        if self.weights:
            groups.append(
                ad.ParamGroup(params=dict(self.weights), lr_multiplier=1.0, name="net")
            )
        for l in sorted(self.heads):
            base = self.heads[l].param_group()
            groups.append(
                ad.ParamGroup(
                    params={f"head{l}.{n}": v for n, v in base.params.items()},
                    lr_multiplier=base.lr_multiplier,
                    weight_decay=base.weight_decay,
                    name=f"head{l}.mrf",
                )
            )
        return groups


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed=seed)


class CheckpointError(Exception):
    """A checkpoint directory is missing pieces or internally inconsistent."""


def save_checkpoint(model: Model, directory, epoch: int = 0, run_state: dict | None = None) -> None:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    named = model.named_params()
    for name, var in named.items():
        pio.write_tensor(var.value, directory / "params" / f"{name}.pstf")
    manifest = {
        "schema_version": 1,
        "architecture": model.config.architecture,
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "offsets": [list(o) for o in model.spec.offsets],
        "params": sorted(named),
        "run_state": run_state or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(directory) -> tuple[Model, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest in {directory}: {exc}") from exc
    try:
        config = ModelConfig.from_dict(manifest["config"])
        names = manifest["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed manifest in {directory}: {exc}") from exc
    model = build_model(config, seed=0)
    named = model.named_params()
    if sorted(named) != sorted(names):
        raise CheckpointError(
            f"checkpoint parameters {sorted(names)} do not match architecture "
            f"parameters {sorted(named)}"
        )
    for name in names:
        path = directory / "params" / f"{name}.pstf"
        if not path.is_file():
            raise CheckpointError(f"missing parameter tensor {path.name}")
        try:
            value = pio.read_tensor(path)
        except pio.TensorFormatError as exc:
            raise CheckpointError(f"corrupted parameter tensor {path.name}: {exc}") from exc
        if value.shape != named[name].value.shape:
            raise CheckpointError(
                f"parameter {name} has shape {value.shape}, expected {named[name].value.shape}"
            )
        named[name].value[...] = value
    return model, manifest
