"""Moments and MSE geometry of the trace, empty-trace and mixed estimators.

The random experiment behind every expectation here is: draw a sample index
``i`` uniformly from the paired datasets, then draw ``(r_pos, r_neg)``
according to a :class:`SamplingLaw`.  ``g_t`` and ``g_e`` share the index
``i``; ``g_e`` does not depend on the trace draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .data import PreferenceDataset, PreferenceSample, check_paired
from .errors import ContractError, EnumerationSizeError
from .losses import DpoConfig, GradientSample, sigmoid
from .policy import EMPTY_TRACE, TracePolicy, grad_joint_table
from .rng import stream

ENUMERATION_LIMIT = 10 ** 6
DEGENERATE_A = 1e-12
DEFAULT_ALPHA = 0.5

POSTERIOR = "posterior"
PRIOR = "prior"
STORED = "stored"


@dataclass(frozen=True)
class SamplingLaw:
    """How ``(r_pos, r_neg)`` are drawn for ``g_t`` given a data sample.

    ``posterior`` draws each trace from ``pi_theta(r | x, y)`` of the policy
    being trained, ``prior`` from ``pi_ref(r | x)`` ignoring the answer, and
    ``stored`` reuses the traces recorded in the dataset.
    """

    mode: str = POSTERIOR

    def __post_init__(self):
        if self.mode not in (POSTERIOR, PRIOR, STORED):
            raise ContractError(f"unknown sampling law {self.mode!r}")


@dataclass
class CellTable:
    """Every realisation of ``g_t`` and ``g_e`` for one parameter value.

    See :mod:`bvpo_lab._kernels` for the array layout.
    """

    gp: np.ndarray
    gn: np.ndarray
    wp: np.ndarray
    wn: np.ndarray
    coef: np.ndarray
    ge: np.ndarray
    mu: np.ndarray

    @property
    def n(self) -> int:
        return self.gp.shape[0]

    @property
    def n_cells(self) -> int:
        return self.gp.shape[0] * self.gp.shape[1] ** 2

    def moments(self) -> "EstimatorMoments":
        mean_t, mean_e, var_t, var_e, cov_te, sq, within = _kernels.moments(
            self.gp, self.gn, self.wp, self.wn, self.coef, self.ge)
        return EstimatorMoments(self.mu.copy(), np.asarray(mean_t), np.asarray(mean_e),
                                float(max(var_t, 0.0)), float(max(var_e, 0.0)), float(cov_te),
                                float(max(sq, 0.0)), method="exact",
                                within_var_t=float(max(within, 0.0)))

    def decomposition(self, alpha: float) -> tuple:
        """``(mse, bias_sq, variance)`` of ``g_c(alpha)``, each enumerated directly."""
        mse, bias_sq, var = _kernels.mixture(self.gp, self.gn, self.wp, self.wn, self.coef,
                                             self.ge, self.mu, float(alpha))
        return float(mse), float(bias_sq), float(var)

    def realise(self, i: int, a: int, b: int, alpha: float = 1.0) -> np.ndarray:
        g_t = self.coef[i, a, b] * (self.gp[i, a] - self.gn[i, b])
        return alpha * g_t + (1.0 - alpha) * self.ge[i]


@dataclass
class EstimatorMoments:
    mu: np.ndarray
    mean_t: np.ndarray
    mean_e: np.ndarray
    var_t: float
    var_e: float
    cov_te: float
    expected_sq_diff: float
    method: str = "exact"
    n_draws: Optional[int] = None
    stderr: Optional[dict] = field(default=None, repr=False)
    # E_i[Var(g_t | i)]: the part of var_t due to trace draws alone (exact only)
    within_var_t: Optional[float] = None

    @property
    def bias_t(self) -> np.ndarray:
        return self.mean_t - self.mu

    @property
    def bias_e(self) -> np.ndarray:
        return self.mean_e - self.mu

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "n_draws": self.n_draws,
            "mu": self.mu.tolist(),
            "mean_t": self.mean_t.tolist(),
            "mean_e": self.mean_e.tolist(),
            "bias_t": self.bias_t.tolist(),
            "bias_e": self.bias_e.tolist(),
            "var_t": self.var_t,
            "var_e": self.var_e,
            "cov_te": self.cov_te,
            "expected_sq_diff": self.expected_sq_diff,
            "within_var_t": self.within_var_t,
        }
        if self.stderr is not None:
            out["stderr"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                             for k, v in self.stderr.items()}
        return out


@dataclass(frozen=True)
class MseCurve:
    """``MSE(alpha) = A alpha^2 - 2 B alpha + C``."""

    A: float
    B: float
    C: float
    alpha_unconstrained: Optional[float]
    alpha_star: float

    def __call__(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        out = self.A * alpha ** 2 - 2.0 * self.B * alpha + self.C
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"A": self.A, "B": self.B, "C": self.C,
                "alpha_unconstrained": self.alpha_unconstrained, "alpha_star": self.alpha_star}


# ---------------------------------------------------------------------------


def combine(gt: GradientSample, ge: GradientSample, alpha: float) -> GradientSample:
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if gt.vector.shape != ge.vector.shape:
        raise ContractError("gradient dimensions differ")
    if alpha == 1.0:
        v = gt.vector.copy()
    elif alpha == 0.0:
        v = ge.vector.copy()
    else:
        v = alpha * gt.vector + (1.0 - alpha) * ge.vector
    return GradientSample(v, "combined", {"alpha": alpha, "trace": gt.randomness,
                                          "empty": ge.randomness})


def _marginal_gradient(policy, ref_policy, prompts, y_pos, y_neg, beta) -> np.ndarray:
    """Vectorised exact gradient of the marginal loss."""
    lp, lr = policy.log_marginal, ref_policy.log_marginal
    mu = np.zeros(policy.shape.dim)
    for x, yp, yn in zip(prompts, y_pos, y_neg):
        m = beta * ((lp[x, yp] - lr[x, yp]) - (lp[x, yn] - lr[x, yn]))
        coef = -float(sigmoid(-m)) * beta
        wp = policy.trace_posterior(x, yp)
        wn = policy.trace_posterior(x, yn)
        mu += coef * (wp @ grad_joint_table(policy, x, yp) - wn @ grad_joint_table(policy, x, yn))
    return mu / len(prompts)


def _trace_weights(policy, ref_policy, x, y, stored_trace, law: SamplingLaw) -> np.ndarray:
    if law.mode == POSTERIOR:
        return policy.trace_posterior(x, y)
    if law.mode == PRIOR:
        return np.exp(ref_policy.log_trace_probs[x])
    w = np.zeros(policy.shape.n_traces)
    w[stored_trace] = 1.0
    return w


def build_cells(policy: TracePolicy, ref_policy: TracePolicy, d_t: PreferenceDataset,
                d_e: PreferenceDataset, cfg: DpoConfig, law: SamplingLaw,
                limit: int = ENUMERATION_LIMIT) -> CellTable:
    check_paired(d_t, d_e)
    n, t, d = len(d_t), policy.shape.n_traces, policy.shape.dim
    if n * t * t > limit:
        raise EnumerationSizeError(f"{n} samples x {t}^2 trace pairs exceeds the limit {limit}")
    beta = cfg.beta
    ratio = policy.log_joint - ref_policy.log_joint
    gp = np.empty((n, t, d))
    gn = np.empty((n, t, d))
    wp = np.empty((n, t))
    wn = np.empty((n, t))
    coef = np.empty((n, t, t))
    ge = np.empty((n, d))
    for i, (st, se) in enumerate(zip(d_t, d_e)):
        x = st.prompt
        gp[i] = grad_joint_table(policy, x, st.y_pos)
        gn[i] = grad_joint_table(policy, x, st.y_neg)
        wp[i] = _trace_weights(policy, ref_policy, x, st.y_pos, st.r_pos, law)
        wn[i] = _trace_weights(policy, ref_policy, x, st.y_neg, st.r_neg, law)
        margin = beta * (ratio[x, :, st.y_pos][:, None] - ratio[x, :, st.y_neg][None, :])
        coef[i] = -beta * sigmoid(-margin)
        m_e = beta * (ratio[x, EMPTY_TRACE, se.y_pos] - ratio[x, EMPTY_TRACE, se.y_neg])
        ge_pos = grad_joint_table(policy, x, se.y_pos)[EMPTY_TRACE]
        ge_neg = grad_joint_table(policy, x, se.y_neg)[EMPTY_TRACE]
        ge[i] = -beta * float(sigmoid(-m_e)) * (ge_pos - ge_neg)
    mu = _marginal_gradient(policy, ref_policy, d_t.prompts, [s.y_pos for s in d_t],
                            [s.y_neg for s in d_t], beta)
    return CellTable(gp, gn, wp, wn, coef, ge, mu)


def exact_moments(policy, ref_policy, d_t, d_e, cfg, law=SamplingLaw()) -> EstimatorMoments:
    """Moments of ``g_t`` and ``g_e`` by enumerating sample index x trace pairs."""
    return build_cells(policy, ref_policy, d_t, d_e, cfg, law).moments()


def mse_curve(m: EstimatorMoments) -> MseCurve:
    b_t, b_e = m.bias_t, m.bias_e
    A = float(m.expected_sq_diff)
    B = float((m.var_e - m.cov_te) + b_e @ b_e - b_t @ b_e)
    C = float(b_e @ b_e + m.var_e)
    if A > DEGENERATE_A:
        unc = B / A
        star = min(1.0, max(0.0, unc))
    else:
        # any alpha is optimal when g_t == g_e almost surely
        unc, star = None, DEFAULT_ALPHA
    return MseCurve(A, B, C, unc, star)


def mse_at(policy, ref_policy, d_t, d_e, cfg, law, alpha: float) -> float:
    """``E ||g_c(alpha) - mu||^2`` by direct enumeration."""
    return build_cells(policy, ref_policy, d_t, d_e, cfg, law).decomposition(alpha)[0]


def conditional_variance(policy, ref_policy, sample_t: PreferenceSample,
                         sample_e: PreferenceSample, cfg: DpoConfig, law: SamplingLaw,
                         alpha: float) -> tuple:
    """Trace-draw variances ``(Var(g_c | data), Var(g_t | data))`` for one fixed data sample."""
    if law.mode == STORED:
        raise ContractError("the stored law has no conditional trace randomness")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if sample_t.prompt != sample_e.prompt:
        raise ContractError("samples must share a prompt")
    d_t = PreferenceDataset([sample_t], sample_t.kind)
    d_e = PreferenceDataset([sample_e], sample_e.kind)
    cells = build_cells(policy, ref_policy, d_t, d_e, cfg, law)
    var_gc = cells.decomposition(alpha)[2]
    var_gt = cells.decomposition(1.0)[2]
    return var_gc, var_gt


def _draw_indices(cells: CellTable, n_draws: int, rng: np.random.Generator) -> tuple:
    i = rng.integers(0, cells.n, size=n_draws)
    u = rng.random((n_draws, 2))
    cp = np.cumsum(cells.wp, axis=1)
    cn = np.cumsum(cells.wn, axis=1)
    t = cells.wp.shape[1]
    a = np.minimum((u[:, :1] * cp[i, -1:] >= cp[i]).sum(axis=1), t - 1)
    b = np.minimum((u[:, 1:] * cn[i, -1:] >= cn[i]).sum(axis=1), t - 1)
    return i, a, b


def _realise_batch(cells: CellTable, i, a, b) -> tuple:
    g_t = cells.coef[i, a, b][:, None] * (cells.gp[i, a] - cells.gn[i, b])
    return g_t, cells.ge[i]


def mc_moments(policy, ref_policy, d_t, d_e, cfg, law, n_draws: int, seed: int = 0,
               chunk: int = 20000) -> EstimatorMoments:
    """Monte-Carlo estimates of the same moments from ``n_draws`` joint draws.

    Variances and the cross-covariance use the ``1/(n-1)`` normalisation.
    ``stderr`` holds a standard error for every scalar field and for every
    coordinate of the two means.
    """
    if n_draws < 2:
        raise ContractError("n_draws must be >= 2")
    cells = build_cells(policy, ref_policy, d_t, d_e, cfg, law, limit=np.iinfo(np.int64).max)
    i, a, b = _draw_indices(cells, n_draws, stream(seed, "mc-moments"))
    d = cells.mu.size
    s_t, s_e = np.zeros(d), np.zeros(d)
    ss_t, ss_e = np.zeros(d), np.zeros(d)
    for lo in range(0, n_draws, chunk):
        g_t, g_e = _realise_batch(cells, i[lo:lo + chunk], a[lo:lo + chunk], b[lo:lo + chunk])
        s_t += g_t.sum(axis=0)
        s_e += g_e.sum(axis=0)
        ss_t += (g_t ** 2).sum(axis=0)
        ss_e += (g_e ** 2).sum(axis=0)
    mean_t, mean_e = s_t / n_draws, s_e / n_draws
    q_var_t, q_var_e, q_cov, q_diff = (np.empty(n_draws) for _ in range(4))
    for lo in range(0, n_draws, chunk):
        sl = slice(lo, lo + chunk)
        g_t, g_e = _realise_batch(cells, i[sl], a[sl], b[sl])
        dt, de = g_t - mean_t, g_e - mean_e
        q_var_t[sl] = (dt ** 2).sum(axis=1)
        q_var_e[sl] = (de ** 2).sum(axis=1)
        q_cov[sl] = (dt * de).sum(axis=1)
        q_diff[sl] = ((g_t - g_e) ** 2).sum(axis=1)
    scale = n_draws / (n_draws - 1)
    root = np.sqrt(n_draws)
    coord_var_t = np.maximum(ss_t / n_draws - mean_t ** 2, 0.0) * scale
    coord_var_e = np.maximum(ss_e / n_draws - mean_e ** 2, 0.0) * scale
    stderr = {
        "var_t": float(q_var_t.std(ddof=1) / root),
        "var_e": float(q_var_e.std(ddof=1) / root),
        "cov_te": float(q_cov.std(ddof=1) / root),
        "expected_sq_diff": float(q_diff.std(ddof=1) / root),
        "mean_t": np.sqrt(coord_var_t / n_draws),
        "mean_e": np.sqrt(coord_var_e / n_draws),
    }
    return EstimatorMoments(cells.mu.copy(), mean_t, mean_e,
                            float(q_var_t.sum() / (n_draws - 1)),
                            float(q_var_e.sum() / (n_draws - 1)),
                            float(q_cov.sum() / (n_draws - 1)),
                            float(q_diff.mean()), method="monte-carlo", n_draws=n_draws,
                            stderr=stderr)
