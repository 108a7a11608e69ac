"""Best/worst-of-n preference datasets sampled from a reference policy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np

from .errors import ContractError
from .policy import EMPTY_TRACE, TracePolicy, sample_forced, sample_trajectory
from .rng import stream

logger = logging.getLogger(__name__)

TRACE = "trace"
EMPTY = "empty"
DEFAULT_N_PER_PROMPT = 5


@dataclass(frozen=True)
class RewardTable:
    reward: np.ndarray

    def __post_init__(self):
        reward = np.array(self.reward, dtype=np.float64)
        if reward.ndim != 2:
            raise ContractError("reward must be a (n_prompts, n_answers) matrix")
        if not np.all(np.isfinite(reward)):
            raise ContractError("reward entries must be finite")
        for x, row in enumerate(reward):
            if np.unique(row).size < 2:
                raise ContractError(f"prompt {x} needs at least two distinct reward values")
        reward.setflags(write=False)
        object.__setattr__(self, "reward", reward)

    def __call__(self, x: int, y: int) -> float:
        return float(self.reward[x, y])

    def to_dict(self) -> dict:
        return {"reward": self.reward.tolist()}


@dataclass(frozen=True)
class PreferenceSample:
    prompt: int
    kind: str
    y_pos: int
    y_neg: int
    r_pos: Optional[int] = None
    r_neg: Optional[int] = None
    tie_break: bool = False

    def __post_init__(self):
        if self.kind == TRACE:
            if self.r_pos is None or self.r_neg is None:
                raise ContractError("trace samples need both traces")
        elif self.kind == EMPTY:
            if self.r_pos is not None or self.r_neg is not None:
                raise ContractError("empty samples carry no traces")
        else:
            raise ContractError(f"unknown sample kind {self.kind!r}")

    @property
    def traces(self) -> tuple:
        """``(r_pos, r_neg)``; the empty trace for kind=empty."""
        if self.kind == EMPTY:
            return EMPTY_TRACE, EMPTY_TRACE
        return self.r_pos, self.r_neg

    def to_dict(self) -> dict:
        out = {"prompt": self.prompt, "kind": self.kind, "y_pos": self.y_pos, "y_neg": self.y_neg,
               "r_pos": self.r_pos, "r_neg": self.r_neg}
        if self.tie_break:
            out["tie_break"] = True
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "PreferenceSample":
        return cls(int(obj["prompt"]), obj["kind"], int(obj["y_pos"]), int(obj["y_neg"]),
                   None if obj.get("r_pos") is None else int(obj["r_pos"]),
                   None if obj.get("r_neg") is None else int(obj["r_neg"]),
                   bool(obj.get("tie_break", False)))


@dataclass
class PreferenceDataset:
    samples: List[PreferenceSample]
    kind: str
    skipped: List[int] = field(default_factory=list)
    paired_with: Optional["PreferenceDataset"] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if any(s.kind != self.kind for s in self.samples):
            raise ContractError("all samples in a dataset must share one kind")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def prompts(self) -> np.ndarray:
        return np.array([s.prompt for s in self.samples], dtype=np.int64)

    def pair(self, other: "PreferenceDataset") -> None:
        if len(self) != len(other) or not np.array_equal(self.prompts, other.prompts):
            raise ContractError("paired datasets must be index-aligned by prompt")
        self.paired_with = other
        other.paired_with = self

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict()) + "\n" for s in self.samples)

    @classmethod
    def from_jsonl(cls, text: str, kind: Optional[str] = None) -> "PreferenceDataset":
        samples = []
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "meta" in obj:
                continue
            samples.append(PreferenceSample.from_dict(obj))
        if kind is None:
            kind = samples[0].kind if samples else TRACE
        return cls(samples, kind)


def check_paired(d_t: PreferenceDataset, d_e: PreferenceDataset) -> None:
    if d_t.kind != TRACE or d_e.kind != EMPTY:
        raise ContractError("expected a trace dataset and an empty-trace dataset")
    if len(d_t) == 0:
        raise ContractError("datasets are empty")
    if len(d_t) != len(d_e) or not np.array_equal(d_t.prompts, d_e.prompts):
        raise ContractError("datasets are not paired by prompt")


def _select(draws: list, rewards: list) -> Optional[tuple]:
    """Pick (preferred, dispreferred, tie_break) draw indices, or None to skip.

    ``np.argmax``/``np.argmin`` return the earliest draw on ties.  When every
    draw has the same reward, the first draw is kept as preferred and the first
    draw that differs from it as dispreferred, flagged as a tie-break.
    """
    rewards = np.asarray(rewards)
    hi, lo = int(np.argmax(rewards)), int(np.argmin(rewards))
    if rewards[hi] > rewards[lo]:
        return hi, lo, False
    for j in range(1, len(draws)):
        if draws[j] != draws[0]:
            return 0, j, True
    return None


def _build(ref_policy, reward, n_per_prompt, seed, kind, draw) -> PreferenceDataset:
    if n_per_prompt < 2:
        raise ContractError("n_per_prompt must be >= 2")
    if reward.reward.shape != (ref_policy.shape.n_prompts, ref_policy.shape.n_answers):
        raise ContractError("reward table shape does not match the policy")
    samples, skipped = [], []
    for x in range(ref_policy.shape.n_prompts):
        rng = stream(seed, f"{kind}-dataset", x)
        draws = [draw(x, rng) for _ in range(n_per_prompt)]
        picked = _select(draws, [reward(x, y) for _, y in draws])
        if picked is None:
            skipped.append(x)
            continue
        hi, lo, tie = picked
        (r_pos, y_pos), (r_neg, y_neg) = draws[hi], draws[lo]
        if kind == EMPTY:
            r_pos = r_neg = None
        samples.append(PreferenceSample(x, kind, y_pos, y_neg, r_pos, r_neg, tie))
    if skipped:
        logger.info("%s dataset: skipped %d of %d prompts (no distinct draws)",
                    kind, len(skipped), ref_policy.shape.n_prompts)
    return PreferenceDataset(samples, kind, skipped)


def build_trace_dataset(ref_policy: TracePolicy, reward: RewardTable,
                        n_per_prompt: int = DEFAULT_N_PER_PROMPT, seed: int = 0) -> PreferenceDataset:
    """Sample ``n_per_prompt`` free trajectories per prompt and keep best/worst."""
    return _build(ref_policy, reward, n_per_prompt, seed, TRACE,
                  lambda x, rng: sample_trajectory(ref_policy, x, rng))


def build_empty_dataset(ref_policy: TracePolicy, reward: RewardTable,
                        n_per_prompt: int = DEFAULT_N_PER_PROMPT, seed: int = 0) -> PreferenceDataset:
    """As :func:`build_trace_dataset` with every trajectory forced to the empty trace."""
    return _build(ref_policy, reward, n_per_prompt, seed, EMPTY,
                  lambda x, rng: (EMPTY_TRACE, sample_forced(ref_policy, x, rng)))


def build_paired_datasets(ref_policy, reward, n_per_prompt=DEFAULT_N_PER_PROMPT, seed=0):
    """Build D_t and D_e and keep only prompts that survived in both.

    Prompts dropped from one side because the other side skipped them are
    added to that side's ``skipped`` list, so nothing disappears silently.
    """
    d_t = build_trace_dataset(ref_policy, reward, n_per_prompt, seed)
    d_e = build_empty_dataset(ref_policy, reward, n_per_prompt, seed)
    keep = set(d_t.prompts.tolist()) & set(d_e.prompts.tolist())
    d_t = _restrict(d_t, keep)
    d_e = _restrict(d_e, keep)
    d_t.pair(d_e)
    return d_t, d_e


def _restrict(ds: PreferenceDataset, keep: Iterable[int]) -> PreferenceDataset:
    keep = set(keep)
    dropped = [s.prompt for s in ds.samples if s.prompt not in keep]
    return PreferenceDataset([s for s in ds.samples if s.prompt in keep], ds.kind,
                             sorted(ds.skipped + dropped))
