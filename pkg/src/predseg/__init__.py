"""Unsupervised feature and connectivity learning for contour detection.

The pieces, in pipeline order:

- :mod:`predseg.io` — image/tensor file formats and deterministic crop loading
- :mod:`predseg.autodiff` — reverse-mode scalar-op engine used by the models
- :mod:`predseg.mrf` — switched pairwise Gaussian MRF: couplings, posteriors
- :mod:`predseg.losses` — the two self-supervised contrastive losses
- :mod:`predseg.models` — pixel/linear/conv trunks with MRF heads, checkpoints
- :mod:`predseg.optim` — SGD with per-group learning rates and the train loop
- :mod:`predseg.segment` — spectral globalization of connectivity into contours
- :mod:`predseg.bench` — boundary-detection PR benchmark (ODS/OIS/AP)
- :mod:`predseg.plot` — minimal native SVG precision-recall plots
- :mod:`predseg.synthetic` — two-region test-image generator
- :mod:`predseg.cli` — the ``predseg`` command

Most callers want :func:`predseg.optim.train`, :func:`predseg.mrf.connectivity_map`,
:func:`predseg.segment.contours`, and :func:`predseg.bench.summarize`; the top-level
namespace re-exports the main entry points for interactive use.
"""

from .bench import BenchResult, GroundTruth, pr_curve, summarize
from .models import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .mrf import ConnectivityMap, CouplingParams, NeighborhoodSpec, connectivity_map
from .optim import TrainResult, TrainSettings, train
from .segment import ContourMap, contours

__version__ = "0.1.0"

__all__ = [
    "BenchResult",
    "ConnectivityMap",
    "ContourMap",
    "CouplingParams",
    "GroundTruth",
    "Model",
    "ModelConfig",
    "NeighborhoodSpec",
    "TrainResult",
    "TrainSettings",
    "build_model",
    "connectivity_map",
    "contours",
    "load_checkpoint",
    "pr_curve",
    "save_checkpoint",
    "summarize",
    "train",
    "__version__",
]
