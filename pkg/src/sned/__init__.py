"""Weight-sharing supernet training for elastic multi-resolution video diffusion."""

__version__ = "0.1.0"

from .model import ModelConfig, Supernet, build_supernet  # noqa: F401
from .searchspace import (  # noqa: F401
    RATIO_SET,
    SearchSpaceConfig,
    SubnetSpec,
    WarmupSchedule,
)
