"""Tabular trace-factorised softmax policies.

A policy assigns, for each prompt ``x``, a softmax over traces ``r`` and,
for each ``(x, r)``, a softmax over answers ``y``::

    pi(r, y | x) = pi(r | x) * pi(y | x, r)

Trace index 0 is reserved for the empty trace.  The parameter vector is laid
out as ``[trace logits | answer logits]``, each block flattened in C order:
trace logits have shape ``(n_prompts, n_traces)`` and answer logits have
shape ``(n_prompts, n_traces, n_answers)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .rng import inverse_cdf

EMPTY_TRACE = 0


@dataclass(frozen=True)
class PolicyShape:
    n_prompts: int
    n_traces: int
    n_answers: int

    def __post_init__(self):
        if self.n_prompts < 1:
            raise ContractError("n_prompts must be positive")
        if self.n_traces < 2:
            raise ContractError("n_traces must be >= 2 (empty trace plus one nonempty trace)")
        if self.n_answers < 2:
            raise ContractError("n_answers must be >= 2")

    @property
    def n_trace_params(self) -> int:
        return self.n_prompts * self.n_traces

    @property
    def dim(self) -> int:
        return self.n_trace_params + self.n_prompts * self.n_traces * self.n_answers

    def trace_slice(self, x: int) -> slice:
        """Flat slice of the trace logits belonging to prompt ``x``."""
        start = x * self.n_traces
        return slice(start, start + self.n_traces)

    def answer_slice(self, x: int, r: int) -> slice:
        """Flat slice of the answer logits belonging to ``(x, r)``."""
        start = self.n_trace_params + (x * self.n_traces + r) * self.n_answers
        return slice(start, start + self.n_answers)

    def check(self, x: int, r: Optional[int] = None, y: Optional[int] = None) -> None:
        if not 0 <= x < self.n_prompts:
            raise IndexError(f"prompt index {x} out of range [0, {self.n_prompts})")
        if r is not None and not 0 <= r < self.n_traces:
            raise IndexError(f"trace index {r} out of range [0, {self.n_traces})")
        if y is not None and not 0 <= y < self.n_answers:
            raise IndexError(f"answer index {y} out of range [0, {self.n_answers})")

    def to_dict(self) -> dict:
        return {"n_prompts": self.n_prompts, "n_traces": self.n_traces, "n_answers": self.n_answers}


@dataclass(frozen=True)
class TraceLength:
    """Token counts per trace; the empty trace has length zero."""

    lengths: tuple

    def __post_init__(self):
        lengths = tuple(int(v) for v in self.lengths)
        if len(lengths) < 2:
            raise ContractError("need lengths for the empty trace and at least one other trace")
        if lengths[0] != 0:
            raise ContractError("the empty trace must have length 0")
        if any(v < 1 for v in lengths[1:]):
            raise ContractError("nonempty traces must have length >= 1")
        object.__setattr__(self, "lengths", lengths)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.lengths, dtype=np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the last axis, max-shifted."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logsumexp(values: np.ndarray, axis: int = -1) -> np.ndarray:
    m = values.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(values - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class TracePolicy:
    shape: PolicyShape
    theta: np.ndarray
    trace_lengths: Optional[TraceLength] = field(default=None, compare=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != self.shape.dim:
            raise ContractError(f"theta has length {theta.size}, shape requires {self.shape.dim}")
        if not np.all(np.isfinite(theta)):
            raise ContractError("theta must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if self.trace_lengths is not None and len(self.trace_lengths.lengths) != self.shape.n_traces:
            raise ContractError("trace_lengths must have one entry per trace")

    @classmethod
    def zeros(cls, shape: PolicyShape, **kw) -> "TracePolicy":
        return cls(shape, np.zeros(shape.dim), **kw)

    @classmethod
    def from_logits(cls, trace_logits, answer_logits, **kw) -> "TracePolicy":
        trace_logits = np.asarray(trace_logits, dtype=np.float64)
        answer_logits = np.asarray(answer_logits, dtype=np.float64)
        shape = PolicyShape(*answer_logits.shape)
        if trace_logits.shape != (shape.n_prompts, shape.n_traces):
            raise ContractError("trace_logits must have shape (n_prompts, n_traces)")
        return cls(shape, np.concatenate([trace_logits.ravel(), answer_logits.ravel()]), **kw)

    def with_theta(self, theta: np.ndarray) -> "TracePolicy":
        return TracePolicy(self.shape, theta, self.trace_lengths)

    @property
    def trace_logits(self) -> np.ndarray:
        s = self.shape
        return self.theta[: s.n_trace_params].reshape(s.n_prompts, s.n_traces)

    @property
    def answer_logits(self) -> np.ndarray:
        s = self.shape
        return self.theta[s.n_trace_params:].reshape(s.n_prompts, s.n_traces, s.n_answers)

    @cached_property
    def log_trace_probs(self) -> np.ndarray:
        """``log pi(r | x)`` with shape ``(n_prompts, n_traces)``."""
        return log_softmax(self.trace_logits)

    @cached_property
    def log_answer_probs(self) -> np.ndarray:
        """``log pi(y | x, r)`` with shape ``(n_prompts, n_traces, n_answers)``."""
        return log_softmax(self.answer_logits)

    @cached_property
    def log_joint(self) -> np.ndarray:
        """``log pi(r, y | x)`` with shape ``(n_prompts, n_traces, n_answers)``."""
        return self.log_trace_probs[:, :, None] + self.log_answer_probs

    @cached_property
    def log_marginal(self) -> np.ndarray:
        """``log pi(y | x)`` with shape ``(n_prompts, n_answers)``."""
        return logsumexp(self.log_joint, axis=1)

    def trace_posterior(self, x: int, y: int) -> np.ndarray:
        """``pi(r | x, y)`` by exact enumeration over traces."""
        self.shape.check(x, y=y)
        col = self.log_joint[x, :, y]
        w = np.exp(col - col.max())
        return w / w.sum()

    # JSON ------------------------------------------------------------------

    def to_dict(self) -> dict:
        out = {"shape": self.shape.to_dict(), "theta": [float(v) for v in self.theta]}
        lengths = self.trace_lengths
        out["trace_lengths"] = list(lengths.lengths) if lengths is not None else None
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TracePolicy":
        shape = PolicyShape(**{k: int(obj["shape"][k]) for k in ("n_prompts", "n_traces", "n_answers")})
        lengths = obj.get("trace_lengths")
        return cls(shape, np.asarray(obj["theta"], dtype=np.float64),
                   TraceLength(lengths) if lengths is not None else None)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TracePolicy":
        return cls.from_dict(json.loads(text))


def joint_logprob(policy: TracePolicy, x: int, r: int, y: int) -> float:
    policy.shape.check(x, r, y)
    return float(policy.log_trace_probs[x, r] + policy.log_answer_probs[x, r, y])


def marginal_logprob(policy: TracePolicy, x: int, y: int) -> float:
    policy.shape.check(x, y=y)
    return float(policy.log_marginal[x, y])


def grad_joint_logprob(policy: TracePolicy, x: int, r: int, y: int) -> np.ndarray:
    """Gradient of ``log pi(r, y | x)`` with respect to theta.

    Only the trace logits of ``x`` and the answer logits of ``(x, r)`` are
    touched: they receive ``onehot(r) - pi(.|x)`` and
    ``onehot(y) - pi(.|x, r)`` respectively.
    """
    s = policy.shape
    s.check(x, r, y)
    g = np.zeros(s.dim)
    ts = s.trace_slice(x)
    g[ts] = -np.exp(policy.log_trace_probs[x])
    g[ts.start + r] += 1.0
    as_ = s.answer_slice(x, r)
    g[as_] = -np.exp(policy.log_answer_probs[x, r])
    g[as_.start + y] += 1.0
    return g


def grad_marginal_logprob(policy: TracePolicy, x: int, y: int) -> np.ndarray:
    """Gradient of ``log pi(y | x)``: posterior-weighted joint gradients."""
    w = policy.trace_posterior(x, y)
    g = np.zeros(policy.shape.dim)
    for r, wr in enumerate(w):
        if wr > 0.0:
            g += wr * grad_joint_logprob(policy, x, r, y)
    return g


def sample_trajectory(policy: TracePolicy, x: int, rng: np.random.Generator) -> tuple:
    """Draw ``r ~ pi(.|x)`` then ``y ~ pi(.|x, r)``.

    Exactly two uniforms are consumed per call (trace first), which lets
    forced-trace sampling share the answer uniform with free sampling.
    """
    policy.shape.check(x)
    u = rng.random(2)
    r = inverse_cdf(np.exp(policy.log_trace_probs[x]), u[0])
    y = inverse_cdf(np.exp(policy.log_answer_probs[x, r]), u[1])
    return r, y


def sample_forced(policy: TracePolicy, x: int, rng: np.random.Generator,
                  trace: int = EMPTY_TRACE) -> int:
    """Draw an answer with the trace forced to ``trace`` (same two-uniform budget)."""
    policy.shape.check(x, trace)
    u = rng.random(2)
    return inverse_cdf(np.exp(policy.log_answer_probs[x, trace]), u[1])


def sample_trace_posterior(policy: TracePolicy, x: int, y: int, rng: np.random.Generator) -> int:
    return inverse_cdf(policy.trace_posterior(x, y), rng.random())


def random_policy(shape: PolicyShape, rng: np.random.Generator, scale: float = 1.0,
                  trace_lengths: Optional[Sequence[int]] = None) -> TracePolicy:
    theta = scale * rng.standard_normal(shape.dim)
    return TracePolicy(shape, theta, TraceLength(trace_lengths) if trace_lengths is not None else None)


def grad_joint_table(policy: TracePolicy, x: int, y: int) -> np.ndarray:
    """Row ``r`` holds :func:`grad_joint_logprob` ``(policy, x, r, y)``; shape ``(n_traces, d)``."""
    s = policy.shape
    s.check(x, y=y)
    t = s.n_traces
    table = np.zeros((t, s.dim))
    ts = s.trace_slice(x)
    table[:, ts] = np.eye(t) - np.exp(policy.log_trace_probs[x])[None, :]
    q = np.exp(policy.log_answer_probs[x])
    for r in range(t):
        as_ = s.answer_slice(x, r)
        table[r, as_] = -q[r]
        table[r, as_.start + y] += 1.0
    return table
