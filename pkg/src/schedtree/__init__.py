"""Trace-driven HPC scheduling workbench: a DQN job-selection agent, its
distillation into a CART regression tree, and an EASY-backfilling simulator
to compare them against FCFS."""

from .workload import Job, SyntheticConfig, generate_synthetic, parse_swf, split_trace
from .simcore import Metrics, run_simulation
from .policies import FCFSPolicy, FeatureSpec
from .dqn import DQNModel, TrainConfig, train_dqn
from .dtree import FitConfig, Tree, fit_cart
from .distill import IRLPolicy, dagger_train

__version__ = "0.1.0"
