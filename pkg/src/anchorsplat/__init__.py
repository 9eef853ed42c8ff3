"""Differentiable Gaussian splatting with screen-space color anchors and basis-function motion."""

__version__ = "0.1.0"

from .camera import CameraModel, project_covariance, project_point  # noqa: E402
from .color import AnchorSpec, ColorFieldConfig, anchor_color, anchor_weight, combined_color, sh_color  # noqa: E402
from .data import (  # noqa: E402
    Dataset, FrameSample, SynthSpec, generate_synthetic, init_from_depth, load_dataset, save_dataset,
)
from .deformation import BasisSet, DeformationField, basis_eval, deform_scene, edm_eval, fps_eval  # noqa: E402
from .gradients import GradientBuffer, backward, finite_diff  # noqa: E402
from .metrics import MetricReport, psnr, ssim  # noqa: E402
from .rasterizer import LossReport, RenderConfig, RenderOutput, masked_loss, render  # noqa: E402
from .scene import GaussianPrimitive, GaussianScene, activations, build_covariance, evaluate_gaussian  # noqa: E402
from .trainer import TrainConfig, TrainResult, adam_step, densify_and_prune, train  # noqa: E402
