from .functional import ShapeError, softmax_channels
from .layers import Mode, set_debug
from .model import ArchSpec, SalsaNet, build_salsanet, forward

__all__ = ["ArchSpec", "Mode", "SalsaNet", "ShapeError", "build_salsanet", "forward",
           "set_debug", "softmax_channels"]
