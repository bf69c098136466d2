"""Few-shot anomaly detection with a differentiable generalized eigenvalue
adaptation layer.

The model meta-trains over many related tasks and adapts to a new one from
a handful of labeled instances by solving, in closed form, for the
projection that best separates anomalous from normal support instances
around a fixed center. See the README for the package layout.
"""

from .data import Episode, LabeledDataset, SupportSet, TaskBundle
from .errors import EigmetaError
from .model import AdaptationResult, ModelConfig, ModelParams, NormalOnlyConfig
from .objective import EpisodeScore, empirical_auc, smoothed_auc
from .training import Checkpoint, EvalReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdaptationResult",
    "Checkpoint",
    "EigmetaError",
    "Episode",
    "EpisodeScore",
    "EvalReport",
    "LabeledDataset",
    "ModelConfig",
    "ModelParams",
    "NormalOnlyConfig",
    "SupportSet",
    "TaskBundle",
    "TrainConfig",
    "empirical_auc",
    "evaluate",
    "smoothed_auc",
    "train",
    "__version__",
]
