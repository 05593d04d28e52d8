"""Numpy implementation of the FastFlowNet lightweight optical-flow network."""
from .flowops import CostVolumeSpec, cddc_spec, channel_shuffle, correlate, square_spec, warp
from .loss import LossWeights, epe, gt_pyramid, multiscale_l2, robust_loss
from .net import NetConfig, WeightStore, decode_level, extract_pyramid, forward, init_weights
from .tensor import ConvSpec, ShapeError

__version__ = "0.1.0"
