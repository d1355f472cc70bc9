"""Input-adaptive channel-sparse super-resolution on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .mask import ChannelMask, MaskParams, MultiSparsity, make_mask
from .network import ModelState, NetworkConfig, forward_dense, forward_masked, init_model
from .sparse import MacReport, mac_count, run_sparse
from .tensor import Tensor

__all__ = [
    "ChannelMask",
    "MacReport",
    "MaskParams",
    "ModelState",
    "MultiSparsity",
    "NetworkConfig",
    "Tensor",
    "forward_dense",
    "forward_masked",
    "init_model",
    "mac_count",
    "make_mask",
    "run_sparse",
]
