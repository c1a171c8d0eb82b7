"""SpikeSCR: a fully spike-driven speech-command network, trained directly or
by curriculum knowledge distillation over decreasing time resolutions."""

__version__ = "0.1.0"

from .augment import AugmentConfig, augment_batch, event_drop, spec_augment
from .compute import Tensor, no_grad
from .data import (CurriculumSchedule, DenseDataset, EventDataset, EventRecording, SyntheticSpec,
                   load_dense, load_events, rebin, save_dense, save_events, spatial_bin,
                   synthetic_dataset, temporal_bin)
from .energy import EnergyReport, compute_energy, count_flops, measure_firing_rates, profile
from .layers import ModelConfig, SpikeSCR, load_checkpoint, save_checkpoint
from .neuron import LIF, NeuronConfig, lif_sequence, lif_step
from .train import DistillConfig, OptimConfig, evaluate, kdcl_run, train_direct

__all__ = [
    "AugmentConfig", "CurriculumSchedule", "DenseDataset", "DistillConfig", "EnergyReport",
    "EventDataset", "EventRecording", "LIF", "ModelConfig", "NeuronConfig", "OptimConfig",
    "SpikeSCR", "SyntheticSpec", "Tensor", "augment_batch", "compute_energy", "count_flops",
    "evaluate", "event_drop", "kdcl_run", "lif_sequence", "lif_step", "load_checkpoint",
    "load_dense", "load_events", "measure_firing_rates", "no_grad", "profile", "rebin",
    "save_checkpoint", "save_dense", "save_events", "spatial_bin", "spec_augment",
    "synthetic_dataset", "temporal_bin", "train_direct",
]
