"""Energy-based likelihoods for reweighting flow-based Boltzmann emulators.

A flow emulator is trained with stochastic interpolants, a time-conditioned
energy model learns the emulator's density with InfoNCE and score matching,
and samples are reweighted to the Boltzmann target using either the energy
model or the exact change-of-variables likelihood.
"""

from .densities import GridQuadrature, TargetDensity, log_partition, make_target
from .ebm import EbmConfig, EnergyModel, log_density, train_ebm
from .emulator import FlowModel, exact_log_likelihood, nll, sample, train_emulator
from .metrics import MetricReport, angle_w2, energy_w2, grid_density_l2
from .reweight import (WeightedEnsemble, bias_resample, estimate_observable, free_energy_difference,
                       importance_weights, von_mises_weight)
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "GridQuadrature", "TargetDensity", "log_partition", "make_target",
    "EbmConfig", "EnergyModel", "log_density", "train_ebm",
    "FlowModel", "exact_log_likelihood", "nll", "sample", "train_emulator",
    "MetricReport", "angle_w2", "energy_w2", "grid_density_l2",
    "WeightedEnsemble", "bias_resample", "estimate_observable", "free_energy_difference",
    "importance_weights", "von_mises_weight", "TrainConfig",
]
