"""Shape completion for fruit-like objects from partial RGB-D views.

Reconstructs complete point clouds and meshes by refining trainable
icosphere prototypes with features extracted from partial observations,
coarse to fine.  See the README for the CLI workflow.
"""

from . import errors, geom, ingest, ndiff, objective
from .model import Checkpoint, Model, ModelConfig
from .objective import EvalReport, LossWeights, eval_metrics

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "EvalReport",
    "LossWeights",
    "Model",
    "ModelConfig",
    "errors",
    "eval_metrics",
    "geom",
    "ingest",
    "ndiff",
    "objective",
    "__version__",
]
