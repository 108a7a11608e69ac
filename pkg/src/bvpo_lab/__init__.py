"""Exactly enumerable laboratory for mixed trace / empty-trace preference gradients."""

__version__ = "0.1.0"

from .data import (PreferenceDataset, PreferenceSample, RewardTable, build_empty_dataset,
                   build_paired_datasets, build_trace_dataset)
from .diagnostics import StochasticityReport, stochasticity_report
from .estimators import (EstimatorMoments, MseCurve, SamplingLaw, combine, conditional_variance,
                         exact_moments, mc_moments, mse_at, mse_curve)
from .losses import (DpoConfig, GradientSample, empty_loss, grad_empty, grad_marginal, grad_trace,
                     marginal_loss, sigmoid_logloss, trace_loss)
from .policy import (PolicyShape, TraceLength, TracePolicy, grad_joint_logprob,
                     grad_marginal_logprob, joint_logprob, marginal_logprob, sample_trace_posterior,
                     sample_trajectory)
from .sgd import (ConvergenceReport, SgdConfig, StepRecord, estimate_smoothness,
                  per_step_optimal_alpha, run_sgd, verify_bound)
