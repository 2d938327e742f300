"""Arm models, reproducible random streams, and the collection trace record.

Every random draw in the package flows through a stream derived from
(master_seed, trial_index, purpose), so any trial can be reproduced in
isolation and trials can be executed in any order or degree of parallelism
without changing results.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

TRACE_SCHEMA_VERSION = 1

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"

# Purpose tags for derived streams. Each purpose gets an independent
# Philox substream; arm-indexed purposes append the arm to the spawn key.
ARM_DRAW = "arm_draw"
POLICY_NOISE = "policy_noise"
GUMBEL_NOISE = "gumbel_noise"
HELD_OUT = "held_out"
MCMC = "mcmc"

_PURPOSE_CODES = {ARM_DRAW: 0, POLICY_NOISE: 1, GUMBEL_NOISE: 2, HELD_OUT: 3, MCMC: 4}


class BanditBiasError(Exception):
    """Base class for package errors."""


class UndefinedMean(BanditBiasError):
    """Sample mean requested for an arm with zero pulls."""


class TraceSchemaError(BanditBiasError):
    """Serialized trace does not match a known schema."""


def substream(master_seed: int, trial_index: int, purpose: str, *extra: int) -> np.random.Generator:
    """Return the independent generator keyed by (master_seed, trial_index, purpose).

    Parameters
    ----------
    master_seed : int
        Campaign-level seed.
    trial_index : int
        Trial within the campaign.
    purpose : str
        One of the purpose tags (ARM_DRAW, POLICY_NOISE, GUMBEL_NOISE,
        HELD_OUT, MCMC).
    *extra : int
        Optional further key components (e.g. the arm index for per-arm
        draw blocks).

    Streams with distinct keys are statistically independent, and the same
    key always yields the same sequence regardless of what other streams
    were consumed.
    """
    code = _PURPOSE_CODES[purpose]
    ss = np.random.SeedSequence(master_seed, spawn_key=(trial_index, code, *extra))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ArmModel:
    """Reward distribution of one arm.

    family is "gaussian" (Normal(mean, obs_std^2)) or "bernoulli"
    (obs_std is ignored and draws are 0.0/1.0).
    """

    family: str
    mean: float
    obs_std: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in (GAUSSIAN, BERNOULLI):
            raise ValueError(f"unknown arm family {self.family!r}")
        if self.family == BERNOULLI and not 0.0 <= self.mean <= 1.0:
            raise ValueError("bernoulli mean must lie in [0, 1]")
        if self.family == GAUSSIAN and self.obs_std <= 0.0:
            raise ValueError("gaussian obs_std must be positive")

    def draw(self, rng: np.random.Generator, size: int | None = None):
        if self.family == GAUSSIAN:
            return rng.normal(self.mean, self.obs_std, size=size)
        out = rng.random(size=size) < self.mean
        return float(out) if size is None else out.astype(np.float64)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "mean": self.mean, "obs_std": self.obs_std}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArmModel":
        return cls(family=d["family"], mean=d["mean"], obs_std=d["obs_std"])


def draw_sample(arm: ArmModel, rng: np.random.Generator) -> float:
    """Draw one reward from the arm, advancing the stream."""
    return float(arm.draw(rng))


@dataclass
class Trace:
    """Record of one adaptive collection run.

    Rounds are indexed 0..T-1. The first K rounds are forced round-robin
    (round r pulls arm r); rounds K..T-1 are governed by the policy.

    decision_stats[j] is the per-arm stat vector computed from the history
    after the first K+j rounds, used to select ``selections[K + j]``. For
    Thompson the rows are the sampled posterior means themselves.
    gumbel_draws[j] holds the additive noise vector for the same decision
    when Gumbel randomization was enabled, else None.
    """

    arms: list[ArmModel]
    policy: Any  # policies.PolicyConfig; kept loose to avoid an import cycle
    T: int
    selections: np.ndarray
    samples_by_arm: list[np.ndarray]
    decision_stats: np.ndarray
    gumbel_draws: np.ndarray | None = None
    held_out_by_arm: list[np.ndarray] | None = None
    master_seed: int = 0
    trial_index: int = 0

    @property
    def K(self) -> int:
        return len(self.arms)

    def counts(self, t: int | None = None) -> np.ndarray:
        """Per-arm pull counts after the first t rounds (default all T)."""
        t = self.T if t is None else t
        return np.bincount(self.selections[:t], minlength=self.K)

    def values_in_draw_order(self) -> np.ndarray:
        """The T reward values re-ordered by round."""
        out = np.empty(self.T)
        cursor = np.zeros(self.K, dtype=np.int64)
        for r in range(self.T):
            a = self.selections[r]
            out[r] = self.samples_by_arm[a][cursor[a]]
            cursor[a] += 1
        return out

    def arm_values_upto(self, arm: int, t: int) -> np.ndarray:
        n = int(self.counts(t)[arm])
        return self.samples_by_arm[arm][:n]

    def validate(self) -> None:
        K, T = self.K, self.T
        if T < K:
            raise ValueError("horizon shorter than the round-robin prefix")
        if self.selections.shape != (T,):
            raise ValueError("selections must have length T")
        if not np.array_equal(self.selections[:K], np.arange(K)):
            raise ValueError("first K rounds must be round-robin")
        if self.selections.min() < 0 or self.selections.max() >= K:
            raise ValueError("selection index out of range")
        n = self.counts()
        if n.sum() != T:
            raise ValueError("counts do not sum to T")
        for k in range(K):
            if len(self.samples_by_arm[k]) != n[k]:
                raise ValueError(f"arm {k} sample count mismatch")
        if self.decision_stats.shape != (T - K, K):
            raise ValueError("decision_stats must have T - K rows")
        if self.gumbel_draws is not None and self.gumbel_draws.shape != (T - K, K):
            raise ValueError("gumbel_draws must have T - K rows")
        if self.held_out_by_arm is not None:
            held = sum(len(h) for h in self.held_out_by_arm)
            if held != T:
                raise ValueError("held-out twin count must equal T")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "schema": TRACE_SCHEMA_VERSION,
            "arms": [a.to_dict() for a in self.arms],
            "policy": self.policy.to_dict(),
            "T": self.T,
            "selections": self.selections.tolist(),
            "samples_by_arm": [s.tolist() for s in self.samples_by_arm],
            "decision_stats": self.decision_stats.tolist(),
            "gumbel_draws": None if self.gumbel_draws is None else self.gumbel_draws.tolist(),
            "held_out_by_arm": None
            if self.held_out_by_arm is None
            else [h.tolist() for h in self.held_out_by_arm],
            "master_seed": self.master_seed,
            "trial_index": self.trial_index,
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Trace":
        from .policies import PolicyConfig

        if d.get("schema") != TRACE_SCHEMA_VERSION:
            raise TraceSchemaError(f"unsupported trace schema {d.get('schema')!r}")
        K = len(d["arms"])
        T = d["T"]
        trace = cls(
            arms=[ArmModel.from_dict(a) for a in d["arms"]],
            policy=PolicyConfig.from_dict(d["policy"]),
            T=T,
            selections=np.asarray(d["selections"], dtype=np.int64),
            samples_by_arm=[np.asarray(s, dtype=np.float64) for s in d["samples_by_arm"]],
            decision_stats=np.asarray(d["decision_stats"], dtype=np.float64).reshape(T - K, K),
            gumbel_draws=None
            if d["gumbel_draws"] is None
            else np.asarray(d["gumbel_draws"], dtype=np.float64).reshape(T - K, K),
            held_out_by_arm=None
            if d["held_out_by_arm"] is None
            else [np.asarray(h, dtype=np.float64) for h in d["held_out_by_arm"]],
            master_seed=d["master_seed"],
            trial_index=d["trial_index"],
        )
        trace.validate()
        return trace

    @classmethod
    def from_json(cls, text: str) -> "Trace":
        return cls.from_dict(json.loads(text))


def sample_mean(trace: Trace, arm: int, t: int | None = None) -> float:
    """Mean of arm's rewards among the first t rounds.

    Raises UndefinedMean when the arm has not been pulled yet.
    """
    t = trace.T if t is None else t
    n = int(trace.counts(t)[arm])
    if n == 0:
        raise UndefinedMean(f"arm {arm} has no samples after {t} rounds")
    return float(trace.samples_by_arm[arm][:n].mean())
