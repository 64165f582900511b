"""Multi-task CNN training kit built around channel-concat 1x1-conv fusion.

Layers from K single-task conv branches are concatenated and projected
back per task by learned 1x1 convolutions at every stage boundary; scalar
cross-network mixing baselines fall out as constrained special cases. The
numeric core is a small tape-based reverse-mode engine over 4-D numpy
arrays.
"""

from .autodiff import (
    GraphConsumedError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
    set_check_finite,
)
from .builder import (
    BackboneSpec,
    LoadError,
    PixelHead,
    StageSpec,
    TaskGraph,
    VectorHead,
    build,
    build_from_config,
    expected_param_count,
    forward_multi,
    toy_vgg,
    vgg16_stages,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetError,
    DatasetHandle,
    TaskDescriptor,
    gen_attr_tasks,
    gen_shapes_tasks,
    load_dataset,
    save_dataset,
)
from .fusion import (
    CrossStitchLayer,
    InitPolicy,
    NddrLayer,
    ShortcutReduce,
    SluiceLayer,
    as_constrained_nddr,
    count_fusion_params,
    shortcut_aggregate,
)
from .losses import normal_loss, softmax_cross_entropy
from .metrics import (
    MetricsLog,
    abs_error_stats,
    age_expectation,
    classification_accuracy,
    confusion_matrix,
    median_low,
    normal_metrics,
    seg_metrics,
)
from .train import (
    SGD,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    evaluate,
    heads_for_tasks,
    load_pretrained,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "GraphConsumedError", "NonFiniteError", "ShapeError", "Tape", "Tensor",
    "backward", "finite_difference_check", "set_check_finite",
    "BackboneSpec", "LoadError", "PixelHead", "StageSpec", "TaskGraph",
    "VectorHead", "build", "build_from_config", "expected_param_count",
    "forward_multi", "toy_vgg", "vgg16_stages",
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "DatasetError", "DatasetHandle", "TaskDescriptor", "gen_attr_tasks",
    "gen_shapes_tasks", "load_dataset", "save_dataset",
    "CrossStitchLayer", "InitPolicy", "NddrLayer", "ShortcutReduce",
    "SluiceLayer", "as_constrained_nddr", "count_fusion_params",
    "shortcut_aggregate",
    "normal_loss", "softmax_cross_entropy",
    "MetricsLog", "abs_error_stats", "age_expectation",
    "classification_accuracy", "confusion_matrix", "median_low",
    "normal_metrics", "seg_metrics",
    "SGD", "TrainConfig", "TrainingDiverged", "TrainResult", "evaluate",
    "heads_for_tasks", "load_pretrained", "train",
    "__version__",
]
