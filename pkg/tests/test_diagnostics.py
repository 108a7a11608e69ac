import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bvpo_lab.diagnostics import format_tables, stochasticity_report
from bvpo_lab.errors import ContractError
from bvpo_lab.policy import PolicyShape, TraceLength, TracePolicy, random_policy
from bvpo_lab.rng import stream
from bvpo_lab.scenarios import (default_answer_lengths, default_trace_lengths, empty_only_policy,
                                heavy_trace_policy)

SHAPE = PolicyShape(20, 8, 6)
LENGTHS = default_trace_lengths(SHAPE.n_traces)
ANSWERS = default_answer_lengths(SHAPE.n_answers)


@given(st.integers(0, 2 ** 32))
def test_empty_only_policy_gives_unit_ratios(seed):
    rep = stochasticity_report(empty_only_policy(SHAPE, seed), LENGTHS, ANSWERS, 5, seed)
    assert abs(rep.var_ratio_logp - 1) <= 1e-9
    assert abs(rep.var_ratio_length - 1) <= 1e-9
    assert abs(rep.mean_length_ratio - 1) <= 1e-9
    assert rep.trace_token_share == 0.0 and math.isnan(rep.nll_trace)


@pytest.mark.parametrize("seed", range(20))
def test_heavy_trace_policy_direction(seed):
    rep = stochasticity_report(heavy_trace_policy(SHAPE, seed), LENGTHS, ANSWERS, 5, seed)
    assert rep.var_ratio_logp > 1 and rep.mean_length_ratio > 1


@given(st.integers(0, 2 ** 32))
def test_report_fields_and_invariants(seed):
    pol = random_policy(SHAPE, stream(seed, "diag"), 2.0)
    rep = stochasticity_report(pol, LENGTHS, ANSWERS, 5, seed)
    assert 0.0 <= rep.trace_token_share <= 1.0
    assert rep.per_question_sample_count == 5
    for k in ("var_ratio_logp", "var_ratio_length", "mean_length_ratio", "nll_think", "nll_no"):
        v = getattr(rep, k)
        assert math.isfinite(v) and v > 0
    assert rep.nll_delta == pytest.approx(rep.nll_think - rep.nll_no)
    again = stochasticity_report(pol, LENGTHS, ANSWERS, 5, seed)
    assert again.to_json() == rep.to_json()


def test_zero_nothinking_variance_sentinel():
    # deterministic empty-trace head: no-thinking log-probs and lengths are constant
    s = PolicyShape(3, 3, 3)
    al = stream(0, "a").standard_normal((3, 3, 3)) * 3.0
    al[:, 0, :] = 0.0
    al[:, 0, 1] = 800.0
    pol = TracePolicy.from_logits(np.zeros((3, 3)), al)
    rep = stochasticity_report(pol, TraceLength([0, 5, 9]), [2, 3, 4], 6, 1)
    assert rep.var_ratio_logp == math.inf and rep.var_ratio_length == math.inf
    assert "var_ratio_logp:zero-denominator" in rep.flags
    assert json.loads(rep.to_json())["var_ratio_logp"] == math.inf


def test_contracts():
    pol = empty_only_policy(SHAPE, 0)
    with pytest.raises(ContractError):
        stochasticity_report(pol, LENGTHS, ANSWERS, 1)
    with pytest.raises(ContractError):
        stochasticity_report(pol, TraceLength([0, 1]), ANSWERS)
    with pytest.raises(ContractError):
        stochasticity_report(pol, LENGTHS, [0] * SHAPE.n_answers)


def test_single_prompt_oracle():
    # n=2 draws: sample variance of two values is half their squared difference
    s = PolicyShape(1, 3, 2)
    pol = random_policy(s, stream(4, "one"), 1.0)
    lengths = TraceLength([0, 7, 11])
    rep = stochasticity_report(pol, lengths, [2, 5], 2, seed=3)
    u = stream(3, "stochasticity", 0).random((2, 2))
    pt = np.exp(pol.log_trace_probs[0])
    lp_t, lp_n, l_t, l_n = [], [], [], []
    for u_r, u_y in u:
        r = int(np.searchsorted(np.cumsum(pt), u_r * pt.sum(), side="right"))
        pa = np.exp(pol.log_answer_probs[0, r])
        y = int(np.searchsorted(np.cumsum(pa), u_y * pa.sum(), side="right"))
        p0 = np.exp(pol.log_answer_probs[0, 0])
        y0 = int(np.searchsorted(np.cumsum(p0), u_y * p0.sum(), side="right"))
        lp_t.append(pol.log_joint[0, r, y])
        lp_n.append(pol.log_answer_probs[0, 0, y0])
        l_t.append([0, 7, 11][r] + [2, 5][y])
        l_n.append([2, 5][y0])
    half_sq = lambda v: (v[0] - v[1]) ** 2 / 2
    if half_sq(lp_n) > 0:
        assert rep.var_logp_think == pytest.approx(half_sq(lp_t), abs=1e-14)
        assert rep.var_logp_no == pytest.approx(half_sq(lp_n), abs=1e-14)
    assert rep.mean_length_ratio == pytest.approx(np.mean(l_t) / np.mean(l_n))
    assert rep.nll_think == pytest.approx(-sum(lp_t) / sum(l_t))


def test_format_tables_layout():
    rep = stochasticity_report(heavy_trace_policy(SHAPE, 1), LENGTHS, ANSWERS, 5, 1)
    text = format_tables(rep, "toy")
    assert "Variance ratio (log p)" in text and "Variance ratio (length)" in text
    assert "Mean length ratio" in text and "NLL_Think" in text and "% increase" in text
    assert "Trace token share" in text and text.count("toy") == 3
