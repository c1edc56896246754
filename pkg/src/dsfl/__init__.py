"""Deterministic simulator of communication-efficient federated learning
via model-output exchange, with parameter-exchange and per-label logit
benchmarks, attack injection, and byte-exact cost accounting."""

import logging

from .aggregation import (EraConfig, PerLabelLogits, TargetUndefinedError,
                          aggregate_era, aggregate_sa, entropy, fd_distill_target,
                          fd_global_perlabel, fd_local_perlabel, mean_entropy,
                          softmax_temp)
from .attacks import (NoisyLabelSpec, PoisonSpec, inject_label_noise,
                      inject_open_noise, poison_logits, poison_model_update)
from .comms import (AccuracyCurve, CostModel, comu_at, initial_open_cost,
                    round_cost, top_accuracy)
from .config import (AttackConfig, ConfigError, DatasetConfig, PartitionConfig,
                     RunConfig, SplitConfig, echo_config, load_config, parse_config)
from .data import (IdxFormatError, LabeledDataset, PartitionPlan, RoundIndexSet,
                   UnlabeledDataset, load_idx, one_hot, partition_iid,
                   partition_noniid_shards, sample_round_indices, split_indices,
                   split_open_private, synth_generate)
from .nn import (ModelParams, ModelSpec, TrainConfig, TrainingDivergenceError,
                 cross_entropy, forward, gradient_check, init_params, sgd_update)
from .protocols import (ClientState, RoundConfig, RoundMetrics, ServerState,
                        dsfl_round, evaluate, fd_initial_update, fd_round, fl_round,
                        open_indices_for_round)
from .runner import RunError, RunResult, compare, run, selftest
from .seeding import derive_seed

__version__ = "0.1.0"

logging.getLogger("dsfl").addHandler(logging.NullHandler())
