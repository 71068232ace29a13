"""Lifelong domain-adaptive 2D-to-3D human pose lifting."""

from .config import RunConfig, desk_scale, load_config
from .skeleton import DEFAULT_SKELETON, Camera, Skeleton, mpjpe, pa_mpjpe

__all__ = ["Camera", "DEFAULT_SKELETON", "RunConfig", "Skeleton", "desk_scale", "load_config", "mpjpe", "pa_mpjpe"]
__version__ = "0.1.0"
