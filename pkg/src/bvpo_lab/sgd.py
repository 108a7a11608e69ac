"""Plain SGD on the marginal loss driven by the stochastic estimators.

Each step records the exact conditional bias, variance and MSE of the
estimator used at that iterate (by enumeration), then takes one seeded
stochastic step.  The records are what the convergence check consumes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import _kernels
from .estimators import (DEFAULT_ALPHA, DEGENERATE_A, CellTable, EstimatorMoments, SamplingLaw,
                         _marginal_gradient, build_cells, mse_curve)
from .errors import ContractError, NumericalAbort
from .losses import DpoConfig
from .policy import PolicyShape, TracePolicy
from .rng import stream

ESTIMATOR_MODES = ("trace", "empty", "fixed-alpha", "optimal-alpha")
FULL_BATCH = "full"
NEXT_LOSS_LIMIT = 20000
SMOOTHNESS_SAFETY = 2.0
BOUND_TOL = 1e-9


@dataclass
class SgdConfig:
    eta: float
    K: int
    estimator: str = "fixed-alpha"
    alpha: float = DEFAULT_ALPHA
    law: SamplingLaw = field(default_factory=SamplingLaw)
    batch: Union[int, str] = 1
    seed: int = 0

    def __post_init__(self):
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ContractError("eta must be finite and nonnegative")
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if self.estimator not in ESTIMATOR_MODES:
            raise ContractError(f"unknown estimator mode {self.estimator!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.batch != FULL_BATCH and (not isinstance(self.batch, (int, np.integer)) or self.batch < 1):
            raise ContractError("batch must be a positive integer or 'full'")
        if isinstance(self.law, str):
            self.law = SamplingLaw(self.law)


@dataclass
class StepRecord:
    k: int
    loss_m: float
    true_grad_norm_sq: float
    bias_norm_sq: float
    variance: float
    mse: float
    alpha_used: float
    expected_next_loss: float = math.nan
    grad_dot_mean: float = math.nan
    alpha_mse: float = math.nan
    alpha_ek: float = math.nan


@dataclass
class ConvergenceReport:
    records: List[StepRecord]
    eta: float
    L_estimate: float
    lhs: float = math.nan
    rhs_exact: float = math.nan
    rhs_uniform: float = math.nan
    rhs_realized: float = math.nan
    descent_mode: str = "expected"
    loss_start: float = math.nan
    loss_end: float = math.nan
    loss_min_observed: float = math.nan
    aborted: Optional[str] = None
    estimator: str = ""

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "records"}
        out["K"] = len(self.records)
        return out


@dataclass(frozen=True)
class StepAlpha:
    alpha_ek: float
    alpha_mse: float
    grid: np.ndarray
    ek_values: np.ndarray

    @property
    def grid_argmin(self) -> float:
        """Smallest grid alpha whose ``E_k`` ties the grid minimum (relative tolerance 1e-12)."""
        lo = float(self.ek_values.min())
        tol = 1e-12 * max(abs(lo), float(np.abs(self.ek_values).max()), 1e-300)
        return float(self.grid[np.flatnonzero(self.ek_values <= lo + tol)[0]])


@dataclass(frozen=True)
class BoundVerdict:
    verdict: str
    lhs: float
    rhs_exact: float
    rhs_uniform: float
    margin_exact: float
    margin_uniform: float

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# smoothness


def estimate_smoothness(policy_shape: PolicyShape, ref_policy: TracePolicy, dataset, cfg: DpoConfig,
                        probe_count: int = 200, radius: float = 1.0, seed: int = 0,
                        centers: Optional[Sequence[np.ndarray]] = None,
                        grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
    """Empirical Lipschitz constant of the marginal-loss gradient, times a safety factor.

    Each probe pair lies within ``radius`` of each other near one of
    ``centers``.  Half of the second points follow a random direction and
    half follow the negative gradient, the direction SGD actually moves.
    ``grad_fn`` replaces the marginal-loss gradient (test seam).
    """
    if probe_count < 10:
        raise ContractError("probe_count must be >= 10")
    dim = policy_shape.dim
    if centers is None:
        centers = [ref_policy.theta]
    centers = [np.asarray(c, dtype=np.float64) for c in centers]
    if grad_fn is None:
        prompts = dataset.prompts
        y_pos = [s.y_pos for s in dataset]
        y_neg = [s.y_neg for s in dataset]

        def grad_fn(theta):
            pol = TracePolicy(policy_shape, theta)
            return _marginal_gradient(pol, ref_policy, prompts, y_pos, y_neg, cfg.beta)

    rng = stream(seed, "smoothness")
    best = 0.0
    for j in range(probe_count):
        c = centers[j % len(centers)]
        v = rng.standard_normal(dim)
        theta = c + 0.5 * radius * rng.random() * v / np.linalg.norm(v)
        g = grad_fn(theta)
        if j % 2 == 0 or not np.any(g):
            u = rng.standard_normal(dim)
        else:
            u = -g
        step = radius * rng.random()
        other = theta + step * u / np.linalg.norm(u)
        dist = np.linalg.norm(other - theta)
        if dist == 0.0:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(other) - g) / dist))
    return SMOOTHNESS_SAFETY * best


# ---------------------------------------------------------------------------
# per-step moments


def batch_moments(m: EstimatorMoments, batch: Union[int, str], n: int) -> EstimatorMoments:
    """Moments of the batch-averaged estimators.

    An integer batch averages that many iid draws, dividing every
    (co)variance by the batch size.  ``"full"`` averages one draw per sample,
    so only the trace-draw part of the variance survives, divided by ``n``.
    """
    if batch == 1:
        return m
    diff = m.bias_t - m.bias_e
    if batch == FULL_BATCH:
        var_t, var_e, cov = m.within_var_t / n, 0.0, 0.0
    else:
        var_t, var_e, cov = m.var_t / batch, m.var_e / batch, m.cov_te / batch
    sq = float(diff @ diff + var_t + var_e - 2.0 * cov)
    return EstimatorMoments(m.mu, m.mean_t, m.mean_e, var_t, var_e, cov, sq, m.method,
                            within_var_t=m.within_var_t)


def mixture_variance(m: EstimatorMoments, alpha: float) -> float:
    return alpha ** 2 * m.var_t + (1 - alpha) ** 2 * m.var_e + 2 * alpha * (1 - alpha) * m.cov_te


def per_step_optimal_alpha(moments_k: EstimatorMoments, eta: float, L: float,
                           grid: Optional[np.ndarray] = None) -> StepAlpha:
    """Minimiser of ``E_k(alpha) = ||Bias_k(alpha)||^2 + eta L Var_k(alpha)`` on [0, 1].

    Also returns the MSE minimiser; the two coincide when ``eta * L == 1``.
    ``ek_values`` is ``E_k`` on ``grid`` (default 101 points); its
    ``grid_argmin`` resolves ties toward the smallest alpha.
    """
    w = eta * L
    b_t, b_e = moments_k.bias_t, moments_k.bias_e
    d = b_t - b_e
    a_e = float(d @ d + w * (moments_k.var_t + moments_k.var_e - 2 * moments_k.cov_te))
    b_coef = float(b_e @ b_e - b_t @ b_e + w * (moments_k.var_e - moments_k.cov_te))
    alpha_ek = min(1.0, max(0.0, b_coef / a_e)) if a_e > DEGENERATE_A else DEFAULT_ALPHA
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid, dtype=np.float64)
    bias = grid[:, None] * b_t[None, :] + (1 - grid[:, None]) * b_e[None, :]
    var = grid ** 2 * moments_k.var_t + (1 - grid) ** 2 * moments_k.var_e \
        + 2 * grid * (1 - grid) * moments_k.cov_te
    ek = (bias ** 2).sum(axis=1) + w * var
    return StepAlpha(alpha_ek, mse_curve(moments_k).alpha_star, grid, ek)


def _slot_distributions(cells: CellTable, batch, alpha: float) -> list:
    """Per-slot (weights, vectors) whose product law is the batch-average law."""
    n = cells.n
    flat_w = []
    for i in range(n):
        for a, b in zip(*np.nonzero(np.outer(cells.wp[i], cells.wn[i]))):
            flat_w.append((i, a, b))
    if batch == FULL_BATCH:
        slots = []
        for i in range(n):
            cells_i = [(a, b) for (j, a, b) in flat_w if j == i]
            w = np.array([cells.wp[i, a] * cells.wn[i, b] for a, b in cells_i])
            v = np.array([cells.realise(i, a, b, alpha) for a, b in cells_i]) / n
            slots.append((w, v))
        return slots
    w = np.array([cells.wp[i, a] * cells.wn[i, b] / n for i, a, b in flat_w])
    v = np.array([cells.realise(i, a, b, alpha) for i, a, b in flat_w]) / batch
    return [(w, v)] * batch


def _expected_next_loss(cells, batch, alpha, theta, eta, loss_args) -> float:
    slots = _slot_distributions(cells, batch, alpha)
    total = 1
    for w, _ in slots:
        total *= len(w)
        if total > NEXT_LOSS_LIMIT:
            return math.nan
    weights = np.ones(1)
    steps = np.zeros((1, theta.size))
    for w, v in slots:
        weights = (weights[:, None] * w[None, :]).ravel()
        steps = (steps[:, None, :] + v[None, :, :]).reshape(-1, theta.size)
    losses = _kernels.marginal_loss_batch(np.ascontiguousarray(theta[None, :] - eta * steps), *loss_args)
    return float(weights @ losses)


def _draw_step(cells: CellTable, batch, alpha: float, rng: np.random.Generator) -> np.ndarray:
    n = cells.n
    if batch == FULL_BATCH:
        index = np.arange(n)
    else:
        index = rng.integers(0, n, size=batch)
    g = np.zeros(cells.mu.size)
    for i in index:
        a = min(int(np.searchsorted(np.cumsum(cells.wp[i]), rng.random(), side="right")), cells.wp.shape[1] - 1)
        b = min(int(np.searchsorted(np.cumsum(cells.wn[i]), rng.random(), side="right")), cells.wn.shape[1] - 1)
        g += cells.realise(i, a, b, alpha)
    return g / len(index)


def _loss_args(ref_policy, d_t, cfg):
    s = ref_policy.shape
    return (d_t.prompts, np.array([x.y_pos for x in d_t], dtype=np.int64),
            np.array([x.y_neg for x in d_t], dtype=np.int64),
            np.ascontiguousarray(ref_policy.log_marginal), float(cfg.beta),
            s.n_prompts, s.n_traces, s.n_answers)


def _loss(theta, loss_args) -> float:
    return float(_kernels.marginal_loss_batch(np.ascontiguousarray(theta[None, :]), *loss_args)[0])


def run_sgd(initial_policy: TracePolicy, ref_policy: TracePolicy, d_t, d_e, cfg: DpoConfig,
            sgd: SgdConfig, L_estimate: float) -> ConvergenceReport:
    """Run ``sgd.K`` steps of ``theta <- theta - eta * g`` and fill a report.

    On a non-finite loss or gradient the run stops; the report keeps the
    records so far and ``aborted`` holds the diagnostic.
    """
    loss_args = _loss_args(ref_policy, d_t, cfg)
    theta = np.array(initial_policy.theta)
    records: List[StepRecord] = []
    report = ConvergenceReport(records, sgd.eta, L_estimate, estimator=sgd.estimator)
    n = len(d_t)
    loss_k = _loss(theta, loss_args)
    losses = [loss_k]
    for k in range(sgd.K):
        policy = initial_policy.with_theta(theta)
        cells = build_cells(policy, ref_policy, d_t, d_e, cfg, sgd.law)
        mom = batch_moments(cells.moments(), sgd.batch, n)
        choice = per_step_optimal_alpha(mom, sgd.eta, L_estimate)
        alpha = {"trace": 1.0, "empty": 0.0, "fixed-alpha": sgd.alpha,
                 "optimal-alpha": choice.alpha_mse}[sgd.estimator]
        mse1, bias_sq, var1 = cells.decomposition(alpha)
        bias_vec = alpha * mom.bias_t + (1 - alpha) * mom.bias_e
        if sgd.batch == 1:
            mse, variance = mse1, var1
        else:
            variance = mixture_variance(mom, alpha)
            mse = bias_sq + variance
        mu = cells.mu
        rec = StepRecord(k, loss_k, float(mu @ mu), bias_sq, variance, mse, alpha,
                         grad_dot_mean=float(mu @ (mu + bias_vec)),
                         alpha_mse=choice.alpha_mse, alpha_ek=choice.alpha_ek)
        if sgd.eta > 0:
            rec.expected_next_loss = _expected_next_loss(cells, sgd.batch, alpha, theta, sgd.eta,
                                                         loss_args)
        step = _draw_step(cells, sgd.batch, alpha, stream(sgd.seed, "sgd-step", k))
        theta = theta - sgd.eta * step
        loss_k = _loss(theta, loss_args)
        records.append(rec)
        if not (np.all(np.isfinite(step)) and math.isfinite(loss_k)):
            report.aborted = f"non-finite loss or gradient at step {k}"
            break
        losses.append(loss_k)
    report.loss_start, report.loss_end = losses[0], losses[-1]
    report.loss_min_observed = min(losses)
    _fill_bounds(report)
    if report.aborted:
        raise NumericalAbort(report.aborted, report)
    return report


def _bound_terms(records: Sequence[StepRecord], eta: float, L: float, loss_end: float):
    K = len(records)
    lhs = float(np.mean([r.true_grad_norm_sq for r in records]))
    floor = float(np.mean([r.bias_norm_sq + eta * L * r.variance for r in records]))
    if eta == 0.0:
        # limit of 2/eta * (L_k - E_k L_{k+1}) as eta -> 0
        descent = 2.0 / K * sum(r.grad_dot_mean for r in records)
        realized, mode = descent, "limit"
    else:
        realized = 2.0 / (K * eta) * (records[0].loss_m - loss_end)
        nxt = [r.expected_next_loss for r in records]
        if all(math.isfinite(v) for v in nxt):
            descent = 2.0 / (K * eta) * sum(r.loss_m - v for r, v in zip(records, nxt))
            mode = "expected"
        else:
            descent, mode = realized, "realized"
    b_c_sq = max(r.bias_norm_sq for r in records)
    sigma_sq = max(r.variance for r in records)
    # L* >= 0 because every per-sample loss is a softplus
    head = 2.0 * records[0].loss_m / (K * eta) if eta > 0 else math.inf
    rhs_uniform = head + b_c_sq + eta * L * sigma_sq
    return lhs, descent + floor, rhs_uniform, realized + floor, mode


def _fill_bounds(report: ConvergenceReport) -> None:
    if not report.records:
        return
    lhs, exact, uniform, realized, mode = _bound_terms(report.records, report.eta,
                                                       report.L_estimate, report.loss_end)
    report.lhs, report.rhs_exact, report.rhs_uniform = lhs, exact, uniform
    report.rhs_realized, report.descent_mode = realized, mode


def verify_bound(report: ConvergenceReport, eta: float, L: float) -> BoundVerdict:
    """Check the averaged-gradient bound against the recorded per-step quantities.

    The descent term telescopes the exact conditional expectations
    ``L_k - E_k[L_{k+1}]`` recorded during the run, which makes the check
    deterministic along one trajectory.  Returns ``bound-not-applicable``
    when ``eta * L > 1``.
    """
    if not report.records:
        raise ContractError("report has no records")
    lhs, exact, uniform, _, _ = _bound_terms(report.records, eta, L, report.loss_end)
    m_exact, m_uniform = exact - lhs, uniform - lhs
    if eta * L > 1.0 + 1e-12:
        verdict = "bound-not-applicable"
    elif m_exact >= -BOUND_TOL and m_uniform >= -BOUND_TOL and exact <= uniform + BOUND_TOL:
        verdict = "pass"
    else:
        verdict = "fail"
    return BoundVerdict(verdict, lhs, exact, uniform, m_exact, m_uniform)
