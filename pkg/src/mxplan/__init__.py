"""Mixed-precision quantization planning for mixture-of-experts blocks."""

from .errors import ConfigError, DataError, InfeasibleError, MxPlanError
from .quant import DEFAULT_SCHEMES, IDENTITY, QuantScheme

__all__ = ["ConfigError", "DataError", "InfeasibleError", "MxPlanError", "DEFAULT_SCHEMES",
           "IDENTITY", "QuantScheme"]
__version__ = "0.1.0"
