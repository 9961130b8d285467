"""Single-image 3D reconstruction with image-constrained radiance fields.

One reference view is hard-wired into the field: its pixels override color in
front of the estimated visible surface, its foreground mask gates density.
All other viewpoints are optimized with score-distillation updates from a
pluggable diffusion-score provider.
"""

from .cameras import (
    REFERENCE_POSE,
    CameraIntrinsics,
    CameraPose,
    PoseBounds,
    RayBundle,
    generate_rays,
    project,
    sample_random_pose,
)
from .constraints import (
    ConstrainedField,
    ReferenceConditioning,
    VisibilityDepthMap,
    WarmStartSchedule,
    compute_visibility_depth,
    warm_alpha,
)
from .diffusion import Conditioning, DiffusionSchedule, DiracProvider, RemoteProvider
from .field import HashGridConfig, MlpConfig, RadianceField
from .objectives import LossWeights
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .volume import MarchConfig, march, march_rays, render_view

__all__ = [
    "REFERENCE_POSE",
    "CameraIntrinsics",
    "CameraPose",
    "Conditioning",
    "ConstrainedField",
    "DiffusionSchedule",
    "DiracProvider",
    "HashGridConfig",
    "LossWeights",
    "MarchConfig",
    "MlpConfig",
    "PoseBounds",
    "RadianceField",
    "RayBundle",
    "ReferenceConditioning",
    "RemoteProvider",
    "TrainConfig",
    "VisibilityDepthMap",
    "WarmStartSchedule",
    "compute_visibility_depth",
    "generate_rays",
    "load_checkpoint",
    "march",
    "march_rays",
    "project",
    "render_view",
    "sample_random_pose",
    "save_checkpoint",
    "train",
    "warm_alpha",
]
