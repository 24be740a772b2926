"""CNN training engine with channel-wise group-lasso sparsification,
periodic structured pruning with live network reconfiguration, dynamic
mini-batch adjustment, and training-cost models."""

from .checkpoint import RunState, load_checkpoint, save_checkpoint
from .costs import (allreduce_cost, bn_memory_traffic,
                    compare_one_time_vs_periodic, count_flops,
                    count_flops_with_plan)
from .data import DatasetHandle, load_cifar10, synth_dataset
from .errors import (ConfigurationError, ConsistencyError, DimensionError,
                     FormatError, InputError, SetupError, SparseTrainError)
from .estimator import PrunedCNNClassifier
from .graph import (ModelGraph, build_toy_resnet, build_toy_vgg, forward,
                    validate_graph)
from .lasso import (LassoGroups, build_lasso_groups,
                    compute_penalty_coefficient, group_lasso_raw_sum,
                    group_lasso_subgradient)
from .pruning import (ChannelMask, PrunePlan, SparsityHistory,
                      apply_reconfiguration, detect_zeroed_channels,
                      plan_channel_gating, plan_channel_union,
                      plan_reconfiguration, plan_sequential, revival_report,
                      zero_flagged_channels)
from .trainer import (HyperParams, TrainingState, adjust_mini_batch,
                      estimate_iteration_memory, lr_schedule, train)

__all__ = [n for n in dir() if not n.startswith("_")]
__version__ = "0.1.0"
