"""Seeded construction of complete lab scenarios.

A scenario bundles a trainable policy, a frozen reference policy, a reward
table and the paired datasets sampled from the reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data import DEFAULT_N_PER_PROMPT, PreferenceDataset, RewardTable, build_paired_datasets
from .errors import ContractError
from .estimators import SamplingLaw, exact_moments, mse_curve
from .losses import DEFAULT_BETA, DpoConfig
from .policy import PolicyShape, TraceLength, TracePolicy
from .rng import MASK64, child_seed, stream

SAMPLING_TEMPERATURE = 0.8


@dataclass
class ScenarioConfig:
    shape: PolicyShape
    theta_init: Union[int, Sequence[float]] = 0
    ref_seed: int = 1
    reward_seed: int = 2
    beta: float = DEFAULT_BETA
    n_per_prompt: int = DEFAULT_N_PER_PROMPT
    law: str = "posterior"
    output_dir: Optional[str] = None
    seed: int = 0
    ref_scale: float = 1.0
    temperature: float = SAMPLING_TEMPERATURE
    perturb: float = 0.5
    trace_lengths: Optional[Sequence[int]] = None
    name: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("ref_seed", "reward_seed", "seed"):
            v = getattr(self, key)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= MASK64:
                raise ContractError(f"{key} must be a 64-bit unsigned integer")
        if isinstance(self.theta_init, (int, np.integer)) and not 0 <= int(self.theta_init) <= MASK64:
            raise ContractError("theta_init seed must be a 64-bit unsigned integer")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        SamplingLaw(self.law)
        DpoConfig(self.beta)

    @classmethod
    def from_dict(cls, obj: dict) -> "ScenarioConfig":
        obj = dict(obj)
        known = {f for f in cls.__dataclass_fields__ if f != "extra"}
        try:
            shape = obj.pop("shape")
            shape = PolicyShape(int(shape["n_prompts"]), int(shape["n_traces"]), int(shape["n_answers"]))
        except (KeyError, TypeError) as exc:
            raise ContractError(f"config needs a shape with n_prompts/n_traces/n_answers: {exc}")
        kw = {k: obj.pop(k) for k in list(obj) if k in known}
        return cls(shape=shape, extra=obj, **kw)

    def to_dict(self) -> dict:
        out = {
            "shape": self.shape.to_dict(),
            "theta_init": self.theta_init if isinstance(self.theta_init, (int, np.integer))
            else [float(v) for v in self.theta_init],
            "ref_seed": int(self.ref_seed), "reward_seed": int(self.reward_seed),
            "beta": self.beta, "n_per_prompt": self.n_per_prompt, "law": self.law,
            "output_dir": self.output_dir, "seed": int(self.seed), "ref_scale": self.ref_scale,
            "temperature": self.temperature, "perturb": self.perturb,
            "trace_lengths": None if self.trace_lengths is None else list(self.trace_lengths),
            "name": self.name,
        }
        out.update(self.extra)
        return out


@dataclass
class Scenario:
    policy: TracePolicy
    ref_policy: TracePolicy
    reward: RewardTable
    d_t: PreferenceDataset
    d_e: PreferenceDataset
    cfg: DpoConfig
    law: SamplingLaw
    seed: int = 0


def reference_policy(shape: PolicyShape, seed: int, scale: float = 1.0,
                     temperature: float = SAMPLING_TEMPERATURE,
                     trace_lengths: Optional[Sequence[int]] = None) -> TracePolicy:
    """Random reference logits; the sampling temperature is folded into them."""
    theta = scale * stream(seed, "ref-logits").standard_normal(shape.dim) / temperature
    return TracePolicy(shape, theta, TraceLength(trace_lengths) if trace_lengths else None)


def random_reward(shape: PolicyShape, seed: int) -> RewardTable:
    return RewardTable(stream(seed, "reward").standard_normal((shape.n_prompts, shape.n_answers)))


def build_scenario(config: ScenarioConfig) -> Scenario:
    shape = config.shape
    ref = reference_policy(shape, config.ref_seed, config.ref_scale, config.temperature,
                           config.trace_lengths)
    reward = random_reward(shape, config.reward_seed)
    d_t, d_e = build_paired_datasets(ref, reward, config.n_per_prompt, config.seed)
    if isinstance(config.theta_init, (int, np.integer)):
        noise = stream(int(config.theta_init), "theta-init").standard_normal(shape.dim)
        theta = ref.theta + config.perturb * noise
    else:
        theta = np.asarray(config.theta_init, dtype=np.float64)
    policy = TracePolicy(shape, theta, ref.trace_lengths)
    return Scenario(policy, ref, reward, d_t, d_e, DpoConfig(config.beta),
                    SamplingLaw(config.law), config.seed)


def random_scenario(seed: int, shape: Optional[PolicyShape] = None, beta: Optional[float] = None,
                    law: str = "posterior", max_shape=(4, 6, 4), **overrides) -> Scenario:
    """Draw a scenario with random shape, scales and beta from a single seed.

    Seeds that would produce an empty paired dataset are deterministically
    re-drawn.
    """
    for attempt in range(100):
        rng = stream(seed, "random-scenario", attempt)
        if shape is None:
            s = PolicyShape(int(rng.integers(2, max_shape[0] + 1)),
                            int(rng.integers(2, max_shape[1] + 1)),
                            int(rng.integers(2, max_shape[2] + 1)))
        else:
            s = shape
        cfg = ScenarioConfig(
            shape=s,
            theta_init=child_seed(seed, "theta", attempt),
            ref_seed=child_seed(seed, "ref", attempt),
            reward_seed=child_seed(seed, "reward", attempt),
            seed=child_seed(seed, "data", attempt),
            beta=float(beta if beta is not None else rng.choice([0.1, 0.5, 1.0, 2.0])),
            ref_scale=float(rng.uniform(0.5, 2.0)),
            perturb=float(rng.uniform(0.3, 1.5)),
            law=law,
        )
        for k, v in overrides.items():
            setattr(cfg, k, v)
        sc = build_scenario(cfg)
        if len(sc.d_t) > 0:
            return sc
    raise RuntimeError(f"could not build a nonempty scenario from seed {seed}")


def default_trace_lengths(n_traces: int, unit: int = 16) -> TraceLength:
    """Empty trace 0 tokens, trace ``r`` ``unit * r`` tokens."""
    return TraceLength([unit * r for r in range(n_traces)])


def default_answer_lengths(n_answers: int, unit: int = 4) -> list:
    return [unit * (y + 1) for y in range(n_answers)]


def empty_only_policy(shape: PolicyShape, seed: int, margin: float = 50.0,
                      trace_lengths: Optional[TraceLength] = None) -> TracePolicy:
    """Policy whose trace head puts all but ~exp(-margin) mass on the empty trace."""
    rng = stream(seed, "empty-only")
    trace_logits = np.zeros((shape.n_prompts, shape.n_traces))
    trace_logits[:, 0] = margin
    answer_logits = rng.standard_normal((shape.n_prompts, shape.n_traces, shape.n_answers))
    return TracePolicy.from_logits(trace_logits, answer_logits, trace_lengths=trace_lengths)


def heavy_trace_policy(shape: PolicyShape, seed: int, trace_scale: float = 2.0,
                       answer_scale: float = 3.0, empty_logit: float = -4.0,
                       trace_lengths: Optional[TraceLength] = None) -> TracePolicy:
    """High-entropy trace head that rarely picks the empty trace.

    Nonempty traces have spread-out logits and sharp, trace-dependent answer
    heads; the empty-trace answer head is mild.
    """
    rng = stream(seed, "heavy-trace")
    trace_logits = trace_scale * rng.standard_normal((shape.n_prompts, shape.n_traces))
    trace_logits[:, 0] = empty_logit
    answer_logits = answer_scale * rng.standard_normal((shape.n_prompts, shape.n_traces, shape.n_answers))
    answer_logits[:, 0, :] /= answer_scale
    return TracePolicy.from_logits(trace_logits, answer_logits, trace_lengths=trace_lengths)


def interior_alpha_scenarios(count: int, seed: int = 0, lo: float = 0.01, hi: float = 0.99,
                             min_A: float = 1e-8, max_tries: int = 10000):
    """Yield ``(scenario, curve)`` pairs whose exact optimal mix lies strictly inside (lo, hi)."""
    found = 0
    for k in range(max_tries):
        sc = random_scenario(child_seed(seed, "interior", k))
        curve = mse_curve(exact_moments(sc.policy, sc.ref_policy, sc.d_t, sc.d_e, sc.cfg, sc.law))
        if lo < curve.alpha_star < hi and curve.A > min_A:
            yield sc, curve
            found += 1
            if found == count:
                return
    raise RuntimeError(f"found only {found} of {count} interior-alpha scenarios")
