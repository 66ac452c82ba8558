"""sdnface: one small CNN that regresses all facial landmarks at once.

The pipeline is grayscale 64x64 crops -> three conv groups -> two fully
connected layers -> 2N coordinates in the crop-relative unit square.
Training data comes from a staged geometric augmentation of detector boxes
(expansion, rotation, stretch, mirror) plus hard-example mining; evaluation
is inter-ocular-normalized error with failure rate and CED curves.

Heavy kernels run through a compiled extension when it built, with a pure
NumPy fallback; see :mod:`sdnface.backend`.
"""
from . import backend
from .errors import SdnError
from .model import (
    CoordFrame,
    GroupSpec,
    LandmarkSet,
    NetworkSpec,
    WeightStore,
    build_network,
    default_spec,
    forward,
    load_weights,
    loss_and_grad,
    predict_landmarks,
    receptive_field,
    save_weights,
)
from .data import (
    CropTransform,
    DatasetManifest,
    FaceSample,
    ManifestEntry,
    WarpParams,
    load_gray_crop,
    parse_pts,
    read_manifest,
    write_manifest,
)
from .augment import AugmentStage, AugmentStageConfig, run_stage, select_hard_examples
from .train import LrPolicy, StageSchedule, lr_at, run_three_stage, train_stage
from .evaluate import ced_curve, evaluate_manifest, failure_rate, nrmse, time_forward

__version__ = "0.1.0"

__all__ = [
    "backend", "SdnError",
    "CoordFrame", "GroupSpec", "LandmarkSet", "NetworkSpec", "WeightStore",
    "build_network", "default_spec", "forward", "load_weights", "loss_and_grad",
    "predict_landmarks", "receptive_field", "save_weights",
    "CropTransform", "DatasetManifest", "FaceSample", "ManifestEntry",
    "WarpParams", "load_gray_crop", "parse_pts", "read_manifest",
    "write_manifest",
    "AugmentStage", "AugmentStageConfig", "run_stage", "select_hard_examples",
    "LrPolicy", "StageSchedule", "lr_at", "run_three_stage", "train_stage",
    "ced_curve", "evaluate_manifest", "failure_rate", "nrmse", "time_forward",
    "__version__",
]
