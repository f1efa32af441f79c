"""Volumetric super-resolution with parallel-connected 3D CNNs and
factorised convolution blocks, in plain numpy."""

from .blocks import (BlockSpec, BlockWeights, build_block, compose_rank1_kernel,
                     compression_ratio, forward_block, param_count)
from .network import (NetConfig, Network, build_network, build_parallelnet, build_volumenet,
                      forward, forward_tiled, param_count_network)

__version__ = "0.1.0"
