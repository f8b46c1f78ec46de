"""Differentially-private federated training of neural survival models."""

from ._backend import backend_name
from .accountant import AccountantInputs, epsilon, log_moment, noise_for_epsilon
from .data import (SurvivalDataset, SynthSpec, TimeBins, discretize,
                   generate_synthetic, load_csv, split_and_partition, standardize)
from .experiment import ExperimentConfig, ExperimentReport, run_experiment
from .federation import (FedConfig, PrivacyParams, aggregate, calibrate_sensitivity,
                         clip_l2, client_update, post_process, run_federated)
from .metrics import (brier_score, censoring_km, concordance_td, integrated_brier,
                      kaplan_meier, negative_ibll, time_grid)
from .models import (Head, breslow_baseline, coxcc_loss, coxph_loss, coxtime_loss,
                     deephit_loss, predict_survival)
from .nn import AdamState, MlpSpec, adam_step, backward, finite_difference_gradient, forward
from .stepfun import StepFunction

__version__ = "0.1.0"
