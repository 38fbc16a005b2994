"""Video pose estimation with masked motion encoding and spatial-motion fusion, on numpy."""

from .config import RunConfig, load as load_config
from .model import SDTCModel
from .tensor import ContractError, DimensionError, NumericError, Tensor

__all__ = ["RunConfig", "load_config", "SDTCModel", "Tensor",
           "ContractError", "DimensionError", "NumericError"]
__version__ = "0.1.0"
