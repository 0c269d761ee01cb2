"""Point-map diffusion policy library.

Structured point maps from depth cameras, multi-modal RGB/point-map fusion,
an mLSTM-block diffusion denoiser trained by score matching, and a synthetic
multi-camera tabletop environment for end-to-end verification on a CPU.
"""

from pmp.diffcore import Tensor, ParamStore, GradientReport, grad_check, set_checked_mode
from pmp.geometry import (
    CameraIntrinsics,
    CameraExtrinsics,
    DepthImage,
    PointMap,
    unproject_pixel,
    project_point,
    build_point_map,
    transform_points,
    normalize_point_map,
)
from pmp.diffusion import NoiseSchedule, Preconditioner, make_schedule, ddim_sample
from pmp.config import Config, parse_config, default_config

__version__ = "0.1.0"
