"""Cascaded point-cloud semantic scene completion on a small numpy autodiff engine."""

from .cascade import ABLATIONS, CasFusionNet, NetworkConfig
from .config import RunConfig, load_config
from .objective import TrainingConfig

__all__ = ["ABLATIONS", "CasFusionNet", "NetworkConfig", "RunConfig", "TrainingConfig", "load_config"]
__version__ = "0.1.0"
