"""Multi-view adversarial augmentation for grid-based trajectory forecasting."""

__version__ = "0.1.0"

from .augment import AugConfig, augment_batch, mixup_views, select_hardest_view, simaug_batch, targeted_fgsm
from .estimator import TrajectoryForecaster
from .grid import GridSpec
from .metrics import EvalReport, evaluate, grid_acc, min_ade_k, min_fde_k
from .model import BackboneConfig, ConvGRUForecaster

__all__ = [
    "AugConfig",
    "BackboneConfig",
    "ConvGRUForecaster",
    "EvalReport",
    "GridSpec",
    "TrajectoryForecaster",
    "augment_batch",
    "evaluate",
    "grid_acc",
    "min_ade_k",
    "min_fde_k",
    "mixup_views",
    "select_hardest_view",
    "simaug_batch",
    "targeted_fgsm",
]
