from .app import SidecarSettings, create_app
from .augment import AugmentationConfig, augment_batch, augment_image
from .backends import DiracBackend, EchoBackend, StubBackend, alpha_bar
from .inversion import ConditioningRegistry

__all__ = [
    "AugmentationConfig",
    "ConditioningRegistry",
    "DiracBackend",
    "EchoBackend",
    "SidecarSettings",
    "StubBackend",
    "alpha_bar",
    "augment_batch",
    "augment_image",
    "create_app",
]
