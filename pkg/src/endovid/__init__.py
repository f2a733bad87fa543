"""Self-supervised video pre-training: divided space-time attention transformer
trained by teacher-student matching over multi-rate, multi-crop views, on a
from-scratch reverse-mode autograd engine."""

from .tensor import Tensor, backward
from .model import ModelConfig, init_params, model_forward, backbone_features
from .views import ViewConfig, sample_views_for_clip, augment_view
from .distill import DistillConfig, DistillState, init_distill_state, train_step, pretrain_run
from .data import VideoClip, Manifest, generate_synthetic_dataset, load_dataset
from .optim import OptimizerState, adamw_step, LrSchedule, cosine_lr
from .gradcheck import grad_check
from .config import RunConfig, build_config, dump_config

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward",
    "ModelConfig", "init_params", "model_forward", "backbone_features",
    "ViewConfig", "sample_views_for_clip", "augment_view",
    "DistillConfig", "DistillState", "init_distill_state", "train_step", "pretrain_run",
    "VideoClip", "Manifest", "generate_synthetic_dataset", "load_dataset",
    "OptimizerState", "adamw_step", "LrSchedule", "cosine_lr",
    "grad_check",
    "RunConfig", "build_config", "dump_config",
    "__version__",
]
