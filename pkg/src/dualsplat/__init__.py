"""Dual-state segmented Gaussian world models on the CPU."""

from .core import (
    BACKGROUND_LABEL,
    Camera,
    GaussianField,
    GaussianPrimitive,
    Observation,
    RigidTransform,
    SceneTransform,
    apply_scene_transform,
    build_covariance,
    compose,
    invert,
)
from .rasterizer import (
    RasterSettings,
    RenderGradients,
    RenderOutput,
    render,
    render_backward,
    project_gaussian,
)
from .segmentation import Classifier, classify, cross_entropy_hard, cross_entropy_soft
from .metrics import psnr, ssim
from .statetransfer import (
    PruneReport,
    PseudoState,
    co_paste,
    co_prune,
    make_pseudo_state,
    synthesize_target,
)
from .losses import LossBreakdown, LossConfig, align_loss, joint_loss, pseudo_loss, recon_loss
from .trainer import AdamState, TrainConfig, TrainResult, adam_step, initialize_fields, train
from .scenegen import DualSceneBundle, SceneSpec, generate

__version__ = "0.1.0"
