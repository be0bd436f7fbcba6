"""Multi-modal transformer for accelerated MR imaging, on a numpy autodiff engine."""
from .model import MTransConfig, init_params, l1_loss, mtrans_forward
from .train import TrainConfig, load_config

__version__ = "0.1.0"

__all__ = ["MTransConfig", "TrainConfig", "init_params", "mtrans_forward", "l1_loss",
           "load_config", "__version__"]
