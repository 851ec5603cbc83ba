"""Multidimensional permutation-equivariant GNNs with edge-graph information bottleneck training."""

from .channel_env import (
    ChannelRealization,
    PowerSolution,
    PrecodingSolution,
    SystemConfig,
    generate_channel,
    project_power,
    sample_channels,
    sum_se_power,
    sum_se_precoding,
)
from .baselines import WmmseConfig, lmmse_basis, wmmse_power, wmmse_precoding, zf_basis
from .perm_weights import (
    PermOperator,
    PermStructure,
    StructuredWeight,
    apply,
    build_graph,
    count_parameters,
    materialize,
    permute,
)
from .gib_objectives import GibConfig, MixturePrior, a_term, e_term, kl_bernoulli, task_reward, total_loss
from .mdgnn_core import Model, ModelConfig, forward, init_model, predict
from .train_engine import TrainConfig, train

__version__ = "0.1.0"
