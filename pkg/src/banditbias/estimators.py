"""Point estimators of the arm means from a collected trace.

naive_estimate     per-arm sample means (negatively biased under adaptive
                   collection for exploitative policies)
heldout_estimate   means of the held-out twin draws; unbiased because the
                   twins never enter the decision stats
propensity_estimate
                   inverse-probability weighting over the policy-driven
                   rounds; unbiased when every arm has positive selection
                   probability every round
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BanditBiasError, Trace
from .policies import selection_probabilities


class SplitMissing(BanditBiasError):
    """Held-out estimate requested from a trace collected without split."""


class ZeroPropensity(BanditBiasError):
    """Some arm had zero selection probability in a policy round."""


@dataclass
class EstimateVector:
    method: str
    estimates: np.ndarray
    effective_counts: np.ndarray


def naive_estimate(trace: Trace, t: int | None = None) -> EstimateVector:
    """Per-arm sample means over the first t rounds (default the full horizon)."""
    t = trace.T if t is None else t
    counts = trace.counts(t)
    if np.any(counts == 0):
        raise ValueError("naive estimate needs at least one pull per arm")
    est = np.array([trace.samples_by_arm[k][: counts[k]].mean() for k in range(trace.K)])
    return EstimateVector("naive", est, counts.astype(np.float64))


def heldout_estimate(trace: Trace) -> EstimateVector:
    if trace.held_out_by_arm is None:
        raise SplitMissing("trace was collected without held-out twins")
    counts = np.array([len(h) for h in trace.held_out_by_arm], dtype=np.float64)
    if np.any(counts == 0):
        raise ValueError("held-out estimate needs at least one twin per arm")
    est = np.array([h.mean() for h in trace.held_out_by_arm])
    return EstimateVector("heldout", est, counts)


def propensity_estimate(trace: Trace) -> EstimateVector:
    """Inverse-probability-weighted estimate over rounds K+1..T.

    mu_hat_k = (1 / (T - K)) * sum over policy rounds of
               1{selected == k} * X_round / P[selected == k | stats]

    Probabilities are recomputed from the recorded decision stats. The K
    round-robin rounds are forced, carry no propensity, and are excluded.
    Raises ZeroPropensity if any arm has zero probability in any round,
    since the weighted sum is then no longer unbiased for that arm.
    """
    K, T = trace.K, trace.T
    if T <= K:
        raise ValueError("no policy-driven rounds to weight")
    values = trace.values_in_draw_order()
    acc = np.zeros(K)
    hits = np.zeros(K)
    for j in range(T - K):
        probs = selection_probabilities(trace.decision_stats[j], trace.policy)
        if probs.min() <= 0.0:
            raise ZeroPropensity(
                f"round {K + j}: arm {int(probs.argmin())} has zero selection probability"
            )
        a = trace.selections[K + j]
        acc[a] += values[K + j] / probs[a]
        hits[a] += 1.0
    return EstimateVector("propensity", acc / (T - K), hits)
