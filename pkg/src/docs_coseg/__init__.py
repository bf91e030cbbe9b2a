"""Deep object co-segmentation of image pairs and groups."""

from .correlation import mutual_correlate, patch_size_for
from .network import NetworkConfig, forward_pair, init_params, load_checkpoint, save_checkpoint
from .tensor import ParamStore, Tensor

__all__ = [
    "NetworkConfig",
    "ParamStore",
    "Tensor",
    "forward_pair",
    "init_params",
    "load_checkpoint",
    "mutual_correlate",
    "patch_size_for",
    "save_checkpoint",
]

__version__ = "0.1.0"
