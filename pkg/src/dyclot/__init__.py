"""Dynamic clone transformer layers, DyClotNet and exact cost analysis on numpy."""

from .analysis import cost_ratio, dct_bottleneck_cost, sepconv_cost
from .layers import BottleneckParams, DctParams, dct_bottleneck_forward, dct_forward, recalibrate
from .model import TrainConfig, build_dyclotnet, evaluate, model_summary, train

__version__ = "0.1.0"
