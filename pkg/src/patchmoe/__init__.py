"""Patch-routed sparse mixture-of-experts convolutional layers for dense
prediction, with balancing losses, a desk-scale synthetic training harness
and routing-collapse analytics."""

__version__ = "0.1.0"

from .balance import GateBatch, entropy_loss, importance_loss, switch_loss, total_loss
from .errors import ConfigError, DataError, DivergenceError
from .moe import (
    ConvExpert,
    GateNetwork,
    MoEConfig,
    PatchConvMoE,
    RoutingDecision,
    count_parameters,
    estimate_flops,
    moe_forward,
    top_k_select,
)
from .model import TinySegModel, miou, pixel_cross_entropy
from .patches import PatchGrid, make_grid, reassemble, split
from .synth import SceneSample, generate_scene, make_dataset
from .tensor import Parameter, Tensor, conv2d, global_avg_pool, relu, sgd_step, softmax
from .train import TrainConfig, Xorshift64Star, evaluate, train
