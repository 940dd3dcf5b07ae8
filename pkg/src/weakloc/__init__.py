"""Joint classification and weakly-supervised ROI localization testbed.

Six training schemes over a shared small convnet, a reverse-mode autodiff
core, a procedural dataset whose labels live entirely inside a small ROI,
and the full F1 / IoU / mAP evaluation protocol.
"""

from .errors import (
    ArtifactError,
    ConfigError,
    DegenerateTransformError,
    EvaluationError,
    LabelError,
    NumericsError,
    ShapeError,
    UsageError,
    WeaklocError,
)
from .tensor import (
    PoolingConfig,
    PoolKind,
    Tape,
    Tensor,
    backward,
    global_pool,
    grad_check,
    load_tensor,
    save_tensor,
)
from .warp import (
    BBoxParams,
    SamplingGrid,
    WarpKind,
    WarpParams,
    bilinear_sample,
    grid_generate,
    params_to_bbox,
)
from .losses import AlphaSchedule, ClassWeights, class_weights, stl_total_loss, sup_loc_loss, wce_loss
from .metrics import MetricsReport, f1_report, heatmap_to_bbox, iou, map_score, ustn_bbox
from .data import Dataset, GenConfig, balanced_profile, generate, paper_profile
from .models import ModelConfig, SCHEMES, ScoreMaps, build_model, load_checkpoint, save_checkpoint
from .training import RunConfig, Schedule, SgdMomentum, TrainResult, evaluate, train

__version__ = "0.1.0"
