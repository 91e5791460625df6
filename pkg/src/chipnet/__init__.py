"""LiDAR drivable-region segmentation: preprocessing, a compact CNN in float
and fixed point, a cycle-level datapath simulator, and map post-processing."""

from .cnn import (
    ChipNetBlockParams,
    ConvParams,
    Network,
    QuantizedNetwork,
    count_mults,
    count_params,
    fixed_forward,
    fuse_block_to_5x5,
    init_network,
    network_forward,
    quantize_network,
)
from .errors import ChipNetError
from .fixedpoint import QFormat, Rounding
from .hwsim import cycle_model, run_network_sim
from .pointcloud import PointCloud, parse_kitti_bin, read_frame
from .postprocess import GridMapConfig, postprocess, rasterize
from .spherical import GridConfig, preprocess

__version__ = "0.1.0"

__all__ = [
    "ChipNetBlockParams", "ChipNetError", "ConvParams", "GridConfig", "GridMapConfig",
    "Network", "PointCloud", "QFormat", "QuantizedNetwork", "Rounding", "count_mults",
    "count_params", "cycle_model", "fixed_forward", "fuse_block_to_5x5", "init_network",
    "network_forward", "parse_kitti_bin", "postprocess", "preprocess", "quantize_network",
    "rasterize", "read_frame", "run_network_sim",
]
