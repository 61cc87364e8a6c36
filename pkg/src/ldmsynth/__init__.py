"""Layered depth map view synthesis on a small numpy autodiff engine."""
from .autodiff import ContractError, DimensionError, NonFiniteError, ParamStore, Tensor
from .config import ConfigError, ModelConfig, nano_config, propagate_shapes, full_config
from .geometry import Camera, Frustum
from .ldm import Ldm

__all__ = [
    "Camera", "ConfigError", "ContractError", "DimensionError", "Frustum", "Ldm", "ModelConfig",
    "NonFiniteError", "ParamStore", "Tensor", "nano_config", "propagate_shapes", "full_config",
]
