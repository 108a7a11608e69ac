"""Thinking vs. no-thinking stochasticity statistics for a tabular policy.

For every prompt, ``n`` responses are drawn with free traces (thinking) and
with the trace forced to the empty trace (no-thinking).  Both modes share
the per-draw uniforms, so a policy that never leaves the empty trace gives
identical samples in both modes.

In no-thinking mode the empty trace is part of the prompt, so a response's
log-probability is ``log pi(y | x, empty)``; in thinking mode it is the
joint ``log pi(r, y | x)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .policy import EMPTY_TRACE, TraceLength, TracePolicy
from .rng import inverse_cdf, stream


@dataclass
class StochasticityReport:
    var_ratio_logp: float
    var_ratio_length: float
    mean_length_ratio: float
    nll_think: float
    nll_no: float
    nll_delta: float
    nll_pct_increase: float
    trace_token_share: float
    nll_trace: float
    nll_answer: float
    per_question_sample_count: int
    var_logp_think: float = math.nan
    var_logp_no: float = math.nan
    var_length_think: float = math.nan
    var_length_no: float = math.nan
    flags: tuple = ()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["flags"] = list(self.flags)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in out.items()}

    def to_json(self) -> str:
        # json writes +inf as Infinity; the sentinel is documented in flags
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _ratio(num: float, den: float, name: str, flags: list) -> float:
    if den > 0.0:
        return num / den
    if num > 0.0:
        flags.append(f"{name}:zero-denominator")
        return math.inf
    flags.append(f"{name}:both-zero")
    return 1.0


def stochasticity_report(policy: TracePolicy, lengths: TraceLength, answer_lengths: Sequence[int],
                         n_per_question: int = 5, seed: int = 0) -> StochasticityReport:
    if n_per_question < 2:
        raise ContractError("n_per_question must be >= 2")
    s = policy.shape
    trace_len = lengths.as_array()
    ans_len = np.asarray(answer_lengths, dtype=np.int64)
    if trace_len.size != s.n_traces or ans_len.size != s.n_answers:
        raise ContractError("length tables do not match the policy shape")
    if np.any(ans_len < 1):
        raise ContractError("answer lengths must be >= 1")

    p_trace = np.exp(policy.log_trace_probs)
    p_ans = np.exp(policy.log_answer_probs)
    v_lp_t, v_lp_n, v_len_t, v_len_n = [], [], [], []
    len_t, len_n = [], []
    nll_t, nll_n, nll_tr, nll_an = [], [], [], []
    trace_tokens = total_tokens = 0
    trace_nll_sum = answer_nll_sum = answer_tokens = 0.0

    for x in range(s.n_prompts):
        u = stream(seed, "stochasticity", x).random((n_per_question, 2))
        lp_t, lp_n, l_t, l_n = [], [], [], []
        for u_r, u_y in u:
            r = inverse_cdf(p_trace[x], u_r)
            y = inverse_cdf(p_ans[x, r], u_y)
            y0 = inverse_cdf(p_ans[x, EMPTY_TRACE], u_y)
            lr = policy.log_trace_probs[x, r]
            ly = policy.log_answer_probs[x, r, y]
            lp_t.append(lr + ly)
            lp_n.append(policy.log_answer_probs[x, EMPTY_TRACE, y0])
            l_t.append(trace_len[r] + ans_len[y])
            l_n.append(ans_len[y0])
            trace_tokens += trace_len[r]
            total_tokens += trace_len[r] + ans_len[y]
            trace_nll_sum += -lr
            answer_nll_sum += -ly
            answer_tokens += ans_len[y]
        lp_t, lp_n = np.array(lp_t), np.array(lp_n)
        l_t, l_n = np.array(l_t, dtype=float), np.array(l_n, dtype=float)
        v_lp_t.append(lp_t.var(ddof=1))
        v_lp_n.append(lp_n.var(ddof=1))
        v_len_t.append(l_t.var(ddof=1))
        v_len_n.append(l_n.var(ddof=1))
        len_t.append(l_t.mean())
        len_n.append(l_n.mean())
        nll_t.append(-lp_t.sum() / l_t.sum())
        nll_n.append(-lp_n.sum() / l_n.sum())

    flags: list = []
    vt, vn = float(np.mean(v_lp_t)), float(np.mean(v_lp_n))
    lt, ln = float(np.mean(v_len_t)), float(np.mean(v_len_n))
    think, no = float(np.mean(nll_t)), float(np.mean(nll_n))
    return StochasticityReport(
        var_ratio_logp=_ratio(vt, vn, "var_ratio_logp", flags),
        var_ratio_length=_ratio(lt, ln, "var_ratio_length", flags),
        mean_length_ratio=float(np.mean(len_t)) / float(np.mean(len_n)),
        nll_think=think,
        nll_no=no,
        nll_delta=think - no,
        nll_pct_increase=100.0 * (think - no) / no if no > 0 else math.nan,
        trace_token_share=trace_tokens / total_tokens,
        nll_trace=trace_nll_sum / trace_tokens if trace_tokens else math.nan,
        nll_answer=answer_nll_sum / answer_tokens,
        per_question_sample_count=n_per_question,
        var_logp_think=vt, var_logp_no=vn, var_length_think=lt, var_length_no=ln,
        flags=tuple(flags),
    )


def format_tables(report: StochasticityReport, label: str = "policy") -> str:
    """Plain-text tables: variance ratios, then length ratio and per-token NLL."""
    def f(v, spec):
        return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, spec)

    rows = [
        f"{'Model':<16} {'Variance ratio (log p)':>24} {'Variance ratio (length)':>24}",
        f"{label:<16} {f(report.var_ratio_logp, '.2f'):>24} {f(report.var_ratio_length, '.2f'):>24}",
        "",
        f"{'Model':<16} {'Mean length ratio':>18} {'NLL_Think':>10} {'NLL_No':>10} "
        f"{'dNLL':>8} {'% increase':>11}",
        f"{label:<16} {f(report.mean_length_ratio, '.2f'):>18} {f(report.nll_think, '.3f'):>10} "
        f"{f(report.nll_no, '.3f'):>10} {f(report.nll_delta, '.3f'):>8} "
        f"{f(report.nll_pct_increase, '.1f') + '%':>11}",
        "",
        f"{'Model':<16} {'Trace token share':>18} {'NLL_trace':>10} {'NLL_answer':>11}",
        f"{label:<16} {f(report.trace_token_share, '.3f'):>18} {f(report.nll_trace, '.3f'):>10} "
        f"{f(report.nll_answer, '.3f'):>11}",
    ]
    return "\n".join(rows) + "\n"
