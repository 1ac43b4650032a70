"""Personalized multi-task federated learning with 1-bit uplinks."""
from .channel import ChannelConfig, outage_prob, transmit
from .data import CohortSpec, FederationData, load_idx, partition_mnist, synth_cohorts
from .discrepancy import DdeConfig, dde_run
from .nn import DeviceShard, LossSpec, ModelParams
from .objective import PenaltyConfig
from .simplex import project_simplex
from .train import TrainConfig, baseline_train, mtfeel_train, train

__all__ = ["ChannelConfig", "CohortSpec", "DdeConfig", "DeviceShard", "FederationData", "LossSpec",
           "ModelParams", "PenaltyConfig", "TrainConfig", "baseline_train", "dde_run", "load_idx",
           "mtfeel_train", "outage_prob", "partition_mnist", "project_simplex", "synth_cohorts",
           "train", "transmit"]
