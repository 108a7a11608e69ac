import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("lab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "lab"))


def central_fd(f, theta, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def dense_tables(policy):
    """Independent probability tables by direct exponentiation and normalisation."""
    s = policy.shape
    tl = np.asarray(policy.theta[: s.n_prompts * s.n_traces]).reshape(s.n_prompts, s.n_traces)
    al = np.asarray(policy.theta[s.n_prompts * s.n_traces:]).reshape(s.n_prompts, s.n_traces, s.n_answers)
    pt = np.exp(tl) / np.exp(tl).sum(axis=1, keepdims=True)
    pa = np.exp(al) / np.exp(al).sum(axis=2, keepdims=True)
    joint = pt[:, :, None] * pa
    return pt, pa, joint, joint.sum(axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_force_cells(policy, ref, d_t, d_e, cfg, law):
    """List of (probability, g_t, g_e) over sample index x trace pairs, plus mu.

    Built from per-sample gradient calls and dense tables only.
    """
    from bvpo_lab.data import PreferenceSample
    from bvpo_lab.losses import grad_empty, grad_marginal, grad_trace

    _, _, joint, _ = dense_tables(policy)
    pt_ref, _, _, _ = dense_tables(ref)
    n, T = len(d_t), policy.shape.n_traces

    def law_weights(x, y, stored):
        if law == "posterior":
            col = joint[x, :, y]
            return col / col.sum()
        if law == "prior":
            return pt_ref[x]
        w = np.zeros(T)
        w[stored] = 1.0
        return w

    cells = []
    for s_t, s_e in zip(d_t, d_e):
        g_e = grad_empty(policy, ref, s_e, cfg).vector
        wp = law_weights(s_t.prompt, s_t.y_pos, s_t.r_pos)
        wn = law_weights(s_t.prompt, s_t.y_neg, s_t.r_neg)
        for a in range(T):
            for b in range(T):
                p = wp[a] * wn[b] / n
                if p == 0.0:
                    continue
                smp = PreferenceSample(s_t.prompt, "trace", s_t.y_pos, s_t.y_neg, a, b)
                cells.append((p, grad_trace(policy, ref, smp, cfg).vector, g_e))
    return cells, grad_marginal(policy, ref, d_t, cfg).vector


def brute_force_stats(cells, mu, alpha=None):
    """Population moments of g_t, g_e (and of g_c(alpha) against mu) over the cells."""
    p = np.array([c[0] for c in cells])
    gt = np.array([c[1] for c in cells])
    ge = np.array([c[2] for c in cells])
    mt, me = p @ gt, p @ ge
    out = {
        "mean_t": mt, "mean_e": me,
        "var_t": float(p @ ((gt - mt) ** 2).sum(axis=1)),
        "var_e": float(p @ ((ge - me) ** 2).sum(axis=1)),
        "cov_te": float(p @ ((gt - mt) * (ge - me)).sum(axis=1)),
        "expected_sq_diff": float(p @ ((gt - ge) ** 2).sum(axis=1)),
    }
    if alpha is not None:
        gc = alpha * gt + (1 - alpha) * ge
        mc = p @ gc
        out["mse"] = float(p @ ((gc - mu) ** 2).sum(axis=1))
        out["bias_sq"] = float(((mc - mu) ** 2).sum())
        out["variance"] = float(p @ ((gc - mc) ** 2).sum(axis=1))
    return out


ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
