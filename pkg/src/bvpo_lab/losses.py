"""DPO-style losses on joint, empty-trace and marginal log-probabilities.

All three losses share the form ``-log sigmoid(beta * (delta_pos - delta_neg))``
where ``delta`` is a policy/reference log-ratio.  They differ only in which
log-probability enters the ratio: the joint ``log pi(r, y | x)`` for sampled
traces, the joint with ``r`` forced to the empty trace, or the marginal
``log pi(y | x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import EMPTY, TRACE, PreferenceDataset, PreferenceSample
from .errors import ContractError
from .policy import EMPTY_TRACE, TracePolicy, grad_joint_logprob, grad_marginal_logprob

DEFAULT_BETA = 0.01

ESTIMATORS = ("trace", "empty", "combined", "marginal")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ContractError("beta must be a positive finite number")


@dataclass(frozen=True)
class GradientSample:
    vector: np.ndarray
    estimator: str
    randomness: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ContractError(f"unknown estimator tag {self.estimator!r}")
        v = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ContractError("gradient vector must be finite")
        object.__setattr__(self, "vector", v)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "vector": self.vector.tolist(),
                "randomness": self.randomness}


def sigmoid_logloss(margin):
    """``-log sigmoid(margin)`` as ``softplus(-margin)``."""
    out = np.logaddexp(0.0, -np.asarray(margin, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=np.float64)))


def _require(sample: PreferenceSample, kind: str) -> None:
    if sample.kind != kind:
        raise ContractError(f"expected a {kind} sample, got {sample.kind}")


def _joint_margin(policy, ref_policy, x, r_pos, y_pos, r_neg, y_neg, beta) -> float:
    lp, lr = policy.log_joint, ref_policy.log_joint
    d_pos = lp[x, r_pos, y_pos] - lr[x, r_pos, y_pos]
    d_neg = lp[x, r_neg, y_neg] - lr[x, r_neg, y_neg]
    return float(beta * (d_pos - d_neg))


def trace_margin(policy, ref_policy, sample, cfg: DpoConfig) -> float:
    _require(sample, TRACE)
    policy.shape.check(sample.prompt, sample.r_pos, sample.y_pos)
    policy.shape.check(sample.prompt, sample.r_neg, sample.y_neg)
    return _joint_margin(policy, ref_policy, sample.prompt, sample.r_pos, sample.y_pos,
                         sample.r_neg, sample.y_neg, cfg.beta)


def empty_margin(policy, ref_policy, sample, cfg: DpoConfig) -> float:
    _require(sample, EMPTY)
    policy.shape.check(sample.prompt, y=sample.y_pos)
    policy.shape.check(sample.prompt, y=sample.y_neg)
    return _joint_margin(policy, ref_policy, sample.prompt, EMPTY_TRACE, sample.y_pos,
                         EMPTY_TRACE, sample.y_neg, cfg.beta)


def marginal_margin(policy, ref_policy, sample, cfg: DpoConfig) -> float:
    """Margin on trace-marginalised answer log-probabilities (traces ignored)."""
    x = sample.prompt
    policy.shape.check(x, y=sample.y_pos)
    policy.shape.check(x, y=sample.y_neg)
    lp, lr = policy.log_marginal, ref_policy.log_marginal
    return float(cfg.beta * ((lp[x, sample.y_pos] - lr[x, sample.y_pos])
                             - (lp[x, sample.y_neg] - lr[x, sample.y_neg])))


def trace_loss(policy, ref_policy, sample, cfg: DpoConfig) -> float:
    return sigmoid_logloss(trace_margin(policy, ref_policy, sample, cfg))


def empty_loss(policy, ref_policy, sample, cfg: DpoConfig) -> float:
    return sigmoid_logloss(empty_margin(policy, ref_policy, sample, cfg))


def _nonempty(dataset: PreferenceDataset) -> None:
    if len(dataset) == 0:
        raise ContractError("dataset is empty")


def marginal_loss(policy, ref_policy, dataset: PreferenceDataset, cfg: DpoConfig) -> float:
    _nonempty(dataset)
    return float(np.mean([sigmoid_logloss(marginal_margin(policy, ref_policy, s, cfg))
                          for s in dataset]))


def _pair_grad(policy, x, r_pos, y_pos, r_neg, y_neg, margin, beta) -> np.ndarray:
    coef = -float(sigmoid(-margin)) * beta
    return coef * (grad_joint_logprob(policy, x, r_pos, y_pos)
                   - grad_joint_logprob(policy, x, r_neg, y_neg))


def grad_trace(policy, ref_policy, sample, cfg: DpoConfig) -> GradientSample:
    m = trace_margin(policy, ref_policy, sample, cfg)
    v = _pair_grad(policy, sample.prompt, sample.r_pos, sample.y_pos, sample.r_neg,
                   sample.y_neg, m, cfg.beta)
    return GradientSample(v, "trace", {"prompt": sample.prompt,
                                       "traces": [sample.r_pos, sample.r_neg]})


def grad_empty(policy, ref_policy, sample, cfg: DpoConfig) -> GradientSample:
    m = empty_margin(policy, ref_policy, sample, cfg)
    v = _pair_grad(policy, sample.prompt, EMPTY_TRACE, sample.y_pos, EMPTY_TRACE,
                   sample.y_neg, m, cfg.beta)
    return GradientSample(v, "empty", {"prompt": sample.prompt})


def grad_marginal(policy, ref_policy, dataset: PreferenceDataset, cfg: DpoConfig) -> GradientSample:
    """Exact gradient of :func:`marginal_loss`: the target every estimator is judged against."""
    _nonempty(dataset)
    g = np.zeros(policy.shape.dim)
    for s in dataset:
        m = marginal_margin(policy, ref_policy, s, cfg)
        coef = -float(sigmoid(-m)) * cfg.beta
        g += coef * (grad_marginal_logprob(policy, s.prompt, s.y_pos)
                     - grad_marginal_logprob(policy, s.prompt, s.y_neg))
    return GradientSample(g / len(dataset), "marginal", {"n_samples": len(dataset)})
