"""Selection policies and their decision statistics.

A policy maps the collection history to a per-arm decision-stat vector,
then selects the argmax, optionally perturbed: with Gumbel randomization
the selection probabilities are an exact softmax of the stats at
temperature tau, and eps-Greedy mixes a uniform branch in front.

All policies break argmax ties toward the lowest arm index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Any, Callable

import numpy as np

from .core import BanditBiasError, Trace, UndefinedMean

GREEDY = "greedy"
EPS_GREEDY = "eps_greedy"
LIL_UCB = "lil_ucb"
THOMPSON = "thompson"

_KINDS = (GREEDY, EPS_GREEDY, LIL_UCB, THOMPSON)

EULER_GAMMA = float(np.euler_gamma)


class NonpositiveLogArgument(BanditBiasError):
    """lil'UCB hyperparameters make log(log((1+eps)N)/delta) undefined."""


@dataclass(frozen=True)
class PolicyConfig:
    """Policy kind plus hyperparameters; unused fields are ignored.

    epsilon        eps-Greedy exploration rate in [0, 1].
    beta, ucb_eps, delta
                   lil'UCB bonus constants.
    alpha          lil'UCB stopping-rule constant; recorded for fidelity
                   with published setups but never used (runs go to a
                   fixed horizon).
    prior_mean, prior_var
                   Thompson Normal prior on each arm mean.
    gumbel_tau     Gumbel randomization temperature; None means hard argmax.
    """

    kind: str
    epsilon: float = 0.1
    beta: float = 1.0
    ucb_eps: float = 0.01
    delta: float = 0.005
    alpha: float = 9.0
    prior_mean: float = 0.0
    prior_var: float = 25.0
    gumbel_tau: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == EPS_GREEDY and not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.gumbel_tau is not None and self.gumbel_tau <= 0.0:
            raise ValueError("gumbel_tau must be positive")
        if self.kind == LIL_UCB:
            if not 0.0 < self.delta < 1.0:
                raise ValueError("delta must lie in (0, 1)")
            if self.ucb_eps <= 0.0 or self.beta <= 0.0:
                raise ValueError("ucb_eps and beta must be positive")
            # worst case is N = 1; the bonus is increasing in N inside the log
            if math.log(1.0 + self.ucb_eps) / self.delta <= 1.0:
                raise NonpositiveLogArgument(
                    "log((1+ucb_eps)N)/delta <= 1 at N=1; bonus undefined"
                )
        if self.kind == THOMPSON and self.prior_var <= 0.0:
            raise ValueError("prior_var must be positive")

    @property
    def randomized(self) -> bool:
        return self.gumbel_tau is not None

    def label(self) -> str:
        base = {GREEDY: "greedy", EPS_GREEDY: f"eps_greedy({self.epsilon:g})",
                LIL_UCB: "lil_ucb", THOMPSON: "thompson"}[self.kind]
        if self.randomized:
            base += f"+gumbel({self.gumbel_tau:g})"
        return base

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PolicyConfig":
        return cls(**d)


def exploration_bonus(config: PolicyConfig, counts: np.ndarray) -> np.ndarray:
    """lil'UCB exploration bonus per arm.

    bonus(N) = (1+beta) (1+sqrt(ucb_eps)) sqrt(2 (1+ucb_eps)
               log(log((1+ucb_eps) N) / delta) / N)
    """
    n = np.asarray(counts, dtype=np.float64)
    if np.any(n < 1):
        raise UndefinedMean("exploration bonus needs at least one pull per arm")
    e = config.ucb_eps
    inner = np.log((1.0 + e) * n) / config.delta
    return (
        (1.0 + config.beta)
        * (1.0 + math.sqrt(e))
        * np.sqrt(2.0 * (1.0 + e) * np.log(inner) / n)
    )


def posterior_params(
    config: PolicyConfig, sums: np.ndarray, counts: np.ndarray, obs_std: float
) -> tuple[np.ndarray, np.ndarray]:
    """Normal-prior, known-variance Gaussian posterior (mean, variance) per arm."""
    obs_var = obs_std * obs_std
    prec = 1.0 / config.prior_var + counts / obs_var
    var = 1.0 / prec
    mean = (config.prior_mean / config.prior_var + sums / obs_var) * var
    return mean, var


def decision_stat_values(
    config: PolicyConfig,
    sums: np.ndarray,
    counts: np.ndarray,
    obs_std: float = 1.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Decision-stat vector from per-arm sums and counts.

    Greedy and eps-Greedy use the sample means, lil'UCB adds the
    exploration bonus, and Thompson draws posterior means (consuming K
    normals from rng, which is then required).
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise UndefinedMean("every arm needs at least one pull")
    means = np.asarray(sums, dtype=np.float64) / counts
    if config.kind in (GREEDY, EPS_GREEDY):
        return means
    if config.kind == LIL_UCB:
        return means + exploration_bonus(config, counts)
    if rng is None:
        raise ValueError("thompson decision stats need a noise stream")
    mean, var = posterior_params(config, np.asarray(sums, dtype=np.float64), counts, obs_std)
    return mean + np.sqrt(var) * rng.standard_normal(len(means))


def decision_stats(
    trace: Trace, t: int, config: PolicyConfig | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Decision-stat vector from the first t rounds of a trace (t >= K)."""
    if t < trace.K:
        raise ValueError("decision stats are defined from round K onward")
    config = trace.policy if config is None else config
    counts = trace.counts(t)
    sums = np.array([trace.samples_by_arm[k][: counts[k]].sum() for k in range(trace.K)])
    return decision_stat_values(config, sums, counts, trace.arms[0].obs_std, rng)


def gumbel_noise(config: PolicyConfig, rng: np.random.Generator, size) -> np.ndarray:
    """Zero-mean Gumbel noise at scale tau (location -tau * Euler gamma)."""
    tau = config.gumbel_tau
    return rng.gumbel(loc=-tau * EULER_GAMMA, scale=tau, size=size)


def select_from_stats(
    config: PolicyConfig,
    stats: np.ndarray,
    omega: float | None = None,
    gumbel: np.ndarray | None = None,
) -> int:
    """Arm selected for a given stat vector and pre-drawn randomization.

    omega is the eps-Greedy branch seed (a single uniform; values below
    epsilon map uniformly onto the K arms). gumbel is the additive noise
    vector when randomization is on.
    """
    K = len(stats)
    if config.kind == EPS_GREEDY and config.epsilon > 0.0:
        if omega is None:
            raise ValueError("eps-greedy selection needs a uniform draw")
        if omega < config.epsilon:
            return min(int(omega * K / config.epsilon), K - 1)
    eff = stats if gumbel is None else stats + gumbel
    return int(np.argmax(eff))


def select(
    trace: Trace,
    t: int,
    config: PolicyConfig | None = None,
    policy_rng: np.random.Generator | None = None,
    gumbel_rng: np.random.Generator | None = None,
) -> int:
    """Selection for round index t of a trace, consuming fresh noise.

    Per round the policy stream is consumed in a fixed order (Thompson
    posterior draws, then the eps-Greedy uniform), and the Gumbel stream
    contributes K draws whenever randomization is enabled, regardless of
    which branch wins.
    """
    config = trace.policy if config is None else config
    stats = decision_stats(trace, t, config, policy_rng)
    omega = None
    if config.kind == EPS_GREEDY and config.epsilon > 0.0:
        if policy_rng is None:
            raise ValueError("eps-greedy selection needs a policy stream")
        omega = float(policy_rng.random())
    g = None
    if config.randomized:
        rng = gumbel_rng if gumbel_rng is not None else policy_rng
        if rng is None:
            raise ValueError("randomized selection needs a gumbel stream")
        g = gumbel_noise(config, rng, trace.K)
    return select_from_stats(config, stats, omega, g)


def softmax(u: np.ndarray, tau: float) -> np.ndarray:
    z = np.asarray(u, dtype=np.float64) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def selection_probabilities(stats: np.ndarray, config: PolicyConfig) -> np.ndarray:
    """Per-arm selection probabilities given the decision-stat vector.

    Gumbel-randomized policies give softmax(stats / tau); eps-Greedy mixes
    epsilon/K of uniform in front of its argmax or softmax branch. Hard
    argmax policies give the indicator of the (lowest-index) argmax.
    Thompson rows are the recorded posterior draws, so the same rule
    applies to them unchanged.
    """
    stats = np.asarray(stats, dtype=np.float64)
    K = len(stats)
    if config.randomized:
        core = softmax(stats, config.gumbel_tau)
    else:
        core = np.zeros(K)
        core[int(np.argmax(stats))] = 1.0
    if config.kind == EPS_GREEDY:
        return config.epsilon / K + (1.0 - config.epsilon) * core
    return core


def selection_probability(stats: np.ndarray, selected: int, config: PolicyConfig) -> float:
    return float(selection_probabilities(stats, config)[selected])


# ---------------------------------------------------------------------------
# Property-check harnesses
# ---------------------------------------------------------------------------

PolicyFn = Callable[[list[np.ndarray], np.random.Generator], int]


@dataclass
class CheckReport:
    property_name: str
    n_instances: int
    n_informative: int
    counterexamples: list[dict]

    @property
    def passed(self) -> bool:
        return not self.counterexamples


def _policy_fn(config: PolicyConfig, obs_std: float = 1.0) -> PolicyFn:
    def fn(histories: list[np.ndarray], rng: np.random.Generator) -> int:
        sums = np.array([h.sum() for h in histories])
        counts = np.array([len(h) for h in histories])
        stats = decision_stat_values(config, sums, counts, obs_std, rng)
        omega = float(rng.random()) if config.kind == EPS_GREEDY and config.epsilon > 0 else None
        g = gumbel_noise(config, rng, len(histories)) if config.randomized else None
        return select_from_stats(config, stats, omega, g)

    return fn


def _random_histories(
    rng: np.random.Generator, K: int, max_len: int = 6
) -> list[np.ndarray]:
    return [rng.normal(0.0, 1.0, size=rng.integers(1, max_len + 1)) for _ in range(K)]


def check_exploit(
    policy: PolicyConfig | PolicyFn,
    n_instances: int = 1000,
    rng: np.random.Generator | None = None,
    max_counterexamples: int = 5,
) -> CheckReport:
    """Randomized property test of the Exploit property.

    For each instance: fix every other arm's history and the policy's
    randomization seed, and present two same-length histories for one arm
    with ordered sample means. Selecting that arm on the lower-mean
    history must imply selecting it on the higher-mean one.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    fn = policy if callable(policy) else _policy_fn(policy)
    counterexamples: list[dict] = []
    informative = 0
    for _ in range(n_instances):
        K = int(rng.integers(2, 6))
        k = int(rng.integers(K))
        histories = _random_histories(rng, K)
        n_k = len(histories[k])
        alt = rng.normal(0.0, 1.0, size=n_k)
        lo, hi = sorted((histories[k], alt), key=lambda v: v.mean())
        seed = int(rng.integers(2**63))
        h_lo = list(histories)
        h_lo[k] = lo
        h_hi = list(histories)
        h_hi[k] = hi
        sel_lo = fn(h_lo, np.random.default_rng(seed))
        sel_hi = fn(h_hi, np.random.default_rng(seed))
        if sel_lo == k:
            informative += 1
            if sel_hi != k:
                if len(counterexamples) < max_counterexamples:
                    counterexamples.append(
                        {"k": k, "low": lo.tolist(), "high": hi.tolist(),
                         "others": [h.tolist() for i, h in enumerate(histories) if i != k],
                         "seed": seed, "sel_low": sel_lo, "sel_high": sel_hi}
                    )
    return CheckReport("exploit", n_instances, informative, counterexamples)


def _conditional_off_arm(stats: np.ndarray, k: int, config: PolicyConfig) -> np.ndarray | None:
    """Law of the selection restricted to arms != k, or None if undefined."""
    p = selection_probabilities(stats, config)
    rest = np.delete(p, k)
    total = rest.sum()
    if total <= 0.0:
        return None
    return rest / total


def check_iio(
    policy: PolicyConfig | PolicyFn,
    n_instances: int = 1000,
    rng: np.random.Generator | None = None,
    max_counterexamples: int = 5,
    atol: float = 1e-12,
) -> CheckReport:
    """Randomized property test of independence of irrelevant observations.

    Two histories differing only in arm k's samples (lengths may differ)
    must induce the same selection law over the other arms, conditioned on
    not selecting k. Branches with exact probabilities (softmax, the
    eps-Greedy uniform branch) are compared analytically; hard-argmax
    branches are compared as selections whenever both land off arm k.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    config = policy if isinstance(policy, PolicyConfig) else None
    fn = policy if callable(policy) else _policy_fn(policy)
    counterexamples: list[dict] = []
    informative = 0
    for _ in range(n_instances):
        K = int(rng.integers(3, 6))
        k = int(rng.integers(K))
        histories = _random_histories(rng, K)
        alt = rng.normal(0.0, 1.0, size=rng.integers(1, 7))
        h2 = list(histories)
        h2[k] = alt
        seed = int(rng.integers(2**63))

        if config is not None and config.kind == EPS_GREEDY:
            # The property holds branch-wise (the mixture weights shift
            # when the overall argmax flips to k itself): the uniform
            # branch is 1/(K-1) off k for any history, equal by
            # construction, so only the exploit branch needs comparing.
            means_a = np.array([h.mean() for h in histories])
            means_b = np.array([h.mean() for h in h2])
            if config.randomized:
                ca = _softmax_off_arm(means_a, k, config.gumbel_tau)
                cb = _softmax_off_arm(means_b, k, config.gumbel_tau)
                informative += 1
                if not np.allclose(ca, cb, atol=atol, rtol=0.0):
                    _record(counterexamples, max_counterexamples, k, histories, alt, seed,
                            {"law_a": ca.tolist(), "law_b": cb.tolist()})
                continue
            sa, sb = int(np.argmax(means_a)), int(np.argmax(means_b))
        elif config is not None and (config.randomized or config.kind == THOMPSON):
            stats_a = _stats_for(config, histories, seed)
            stats_b = _stats_for(config, h2, seed)
            ca = _conditional_off_arm(stats_a, k, config)
            cb = _conditional_off_arm(stats_b, k, config)
            if ca is None or cb is None:
                continue
            informative += 1
            if not np.allclose(ca, cb, atol=atol, rtol=0.0):
                _record(counterexamples, max_counterexamples, k, histories, alt, seed,
                        {"law_a": ca.tolist(), "law_b": cb.tolist()})
            continue
        else:
            sa = fn(histories, np.random.default_rng(seed))
            sb = fn(h2, np.random.default_rng(seed))
        if sa == k or sb == k:
            continue
        informative += 1
        if sa != sb:
            _record(counterexamples, max_counterexamples, k, histories, alt, seed,
                    {"sel_a": sa, "sel_b": sb})
    return CheckReport("iio", n_instances, informative, counterexamples)


def _softmax_off_arm(stats: np.ndarray, k: int, tau: float) -> np.ndarray:
    rest = softmax(np.delete(stats, k), tau)
    return rest


def _stats_for(config: PolicyConfig, histories: list[np.ndarray], seed: int) -> np.ndarray:
    sums = np.array([h.sum() for h in histories])
    counts = np.array([len(h) for h in histories])
    return decision_stat_values(config, sums, counts, 1.0, np.random.default_rng(seed))


def _record(store: list, cap: int, k: int, histories, alt, seed: int, extra: dict) -> None:
    if len(store) < cap:
        store.append(
            {"k": k, "histories": [h.tolist() for h in histories],
             "alt": alt.tolist(), "seed": seed, **extra}
        )
