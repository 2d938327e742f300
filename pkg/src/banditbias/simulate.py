"""Trial execution, campaign aggregation, and exact small-case enumeration."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .core import (
    ARM_DRAW,
    BanditBiasError,
    GUMBEL_NOISE,
    HELD_OUT,
    POLICY_NOISE,
    ArmModel,
    Trace,
    substream,
)
from .policies import (
    EPS_GREEDY,
    EULER_GAMMA,
    LIL_UCB,
    THOMPSON,
    PolicyConfig,
    exploration_bonus,
)

# Chunk boundaries are fixed so that reductions happen in the same order
# for every worker count; only then are campaign outputs byte-identical
# across --threads settings.
_CHUNK = 256
_CMLE_CHUNK = 16


class StateSpaceTooLarge(BanditBiasError):
    """Exact enumeration requested beyond the supported horizon."""


def run_trial(
    arms: Sequence[ArmModel],
    policy: PolicyConfig,
    T: int,
    master_seed: int = 0,
    trial_index: int = 0,
    split: bool = False,
) -> Trace:
    """Collect one trace: K round-robin rounds, then policy-driven rounds.

    When split is on, every round also draws a held-out twin from the
    selected arm; twins come from their own stream so the main trajectory
    is unchanged by the split flag.
    """
    K = len(arms)
    if T < K:
        raise ValueError("horizon must cover the round-robin prefix")
    if K < 1:
        raise ValueError("need at least one arm")
    obs_std = arms[0].obs_std

    # Pre-drawn blocks. Arm k's m-th pull is its m-th pre-drawn value, so
    # the values an arm yields do not depend on when it is selected.
    draws = [arms[k].draw(substream(master_seed, trial_index, ARM_DRAW, k), T) for k in range(K)]
    held = None
    if split:
        held = [
            arms[k].draw(substream(master_seed, trial_index, HELD_OUT, k), T) for k in range(K)
        ]

    n_dec = T - K
    tau = policy.gumbel_tau
    gumbels = None
    if policy.randomized and n_dec > 0:
        grng = substream(master_seed, trial_index, GUMBEL_NOISE)
        gumbels = grng.gumbel(loc=-tau * EULER_GAMMA, scale=tau, size=(n_dec, K))

    eps_u = None
    ts_z = None
    if n_dec > 0:
        if policy.kind == EPS_GREEDY:
            eps_u = substream(master_seed, trial_index, POLICY_NOISE).random(n_dec)
        elif policy.kind == THOMPSON:
            ts_z = substream(master_seed, trial_index, POLICY_NOISE).standard_normal((n_dec, K))

    bonus_table = None
    if policy.kind == LIL_UCB:
        bonus_table = np.concatenate(([np.nan], exploration_bonus(policy, np.arange(1, T + 1))))

    obs_var = obs_std * obs_std
    prior_prec = 1.0 / policy.prior_var if policy.kind == THOMPSON else 0.0
    prior_term = policy.prior_mean * prior_prec if policy.kind == THOMPSON else 0.0

    selections = np.empty(T, dtype=np.int64)
    stats_rows = np.empty((n_dec, K))
    counts = np.zeros(K, dtype=np.int64)
    sums = np.zeros(K)

    for r in range(T):
        if r < K:
            a = r
        else:
            j = r - K
            means = sums / counts
            if policy.kind == LIL_UCB:
                stats = means + bonus_table[counts]
            elif policy.kind == THOMPSON:
                pv = 1.0 / (prior_prec + counts / obs_var)
                stats = (prior_term + sums / obs_var) * pv + np.sqrt(pv) * ts_z[j]
            else:
                stats = means
            stats_rows[j] = stats
            a = -1
            if eps_u is not None and policy.epsilon > 0.0 and eps_u[j] < policy.epsilon:
                a = min(int(eps_u[j] * K / policy.epsilon), K - 1)
            if a < 0:
                eff = stats + gumbels[j] if gumbels is not None else stats
                a = int(np.argmax(eff))
        x = draws[a][counts[a]]
        selections[r] = a
        sums[a] += x
        counts[a] += 1

    samples_by_arm = [draws[k][: counts[k]].copy() for k in range(K)]
    held_by_arm = None
    if split:
        held_by_arm = [held[k][: counts[k]].copy() for k in range(K)]
    return Trace(
        arms=list(arms),
        policy=policy,
        T=T,
        selections=selections,
        samples_by_arm=samples_by_arm,
        decision_stats=stats_rows,
        gumbel_draws=gumbels,
        held_out_by_arm=held_by_arm,
        master_seed=master_seed,
        trial_index=trial_index,
    )


def _running_means(trace: Trace) -> np.ndarray:
    """(T, K) matrix of per-arm sample means after each round (nan before first pull)."""
    T, K = trace.T, trace.K
    onehot = np.zeros((T, K))
    onehot[np.arange(T), trace.selections] = 1.0
    csum = np.cumsum(onehot * trace.values_in_draw_order()[:, None], axis=0)
    ccnt = np.cumsum(onehot, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return csum / ccnt


@dataclass
class ExperimentReport:
    """Campaign aggregates at each checkpoint (t = completed rounds)."""

    arms: list[ArmModel]
    policy: PolicyConfig
    T: int
    n_trials: int
    master_seed: int
    checkpoints: list[int]
    bias: np.ndarray  # (n_ckpt, K)
    bias_se: np.ndarray  # (n_ckpt, K)
    mse: np.ndarray  # (n_ckpt, K)
    joint_freq: np.ndarray  # (n_ckpt, K+1); column m = frac of trials with m arms biased low

    @property
    def pooled_bias(self) -> np.ndarray:
        return self.bias.mean(axis=1)

    @property
    def pooled_mse(self) -> np.ndarray:
        return self.mse.mean(axis=1)


def _campaign_chunk(args) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arms, policy, T, master_seed, split, checkpoints, lo, hi = args
    K = len(arms)
    mu = np.array([a.mean for a in arms])
    ckpt_idx = np.asarray(checkpoints) - 1
    s = np.zeros((len(checkpoints), K))
    ss = np.zeros((len(checkpoints), K))
    hist = np.zeros((len(checkpoints), K + 1))
    for i in range(lo, hi):
        trace = run_trial(arms, policy, T, master_seed, i, split)
        bias = _running_means(trace)[ckpt_idx] - mu
        s += bias
        ss += bias * bias
        m = (bias < 0.0).sum(axis=1)
        hist[np.arange(len(checkpoints)), m] += 1.0
    return s, ss, hist


def _map_chunks(worker, jobs: list, workers: int) -> Iterable:
    if workers <= 1:
        return map(worker, jobs)
    pool = ProcessPoolExecutor(max_workers=workers)
    try:
        return list(pool.map(worker, jobs))
    finally:
        pool.shutdown()


def _chunk_ranges(n: int, size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def run_campaign(
    arms: Sequence[ArmModel],
    policy: PolicyConfig,
    T: int,
    n_trials: int,
    master_seed: int = 0,
    checkpoints: Sequence[int] | None = None,
    split: bool = False,
    workers: int = 1,
) -> ExperimentReport:
    """Run n_trials independent traces and aggregate bias, MSE and the
    joint-bias frequency table at each checkpoint.

    Trials are keyed by index, chunks are reduced in index order, so the
    report is identical for every workers setting.
    """
    K = len(arms)
    checkpoints = [T] if checkpoints is None else sorted(checkpoints)
    if checkpoints[0] < K or checkpoints[-1] > T:
        raise ValueError("checkpoints must lie in [K, T]")
    jobs = [
        (list(arms), policy, T, master_seed, split, list(checkpoints), lo, hi)
        for lo, hi in _chunk_ranges(n_trials, _CHUNK)
    ]
    s = np.zeros((len(checkpoints), K))
    ss = np.zeros((len(checkpoints), K))
    hist = np.zeros((len(checkpoints), K + 1))
    for ps, pss, ph in _map_chunks(_campaign_chunk, jobs, workers):
        s += ps
        ss += pss
        hist += ph
    n = float(n_trials)
    bias = s / n
    var = np.maximum(ss / n - bias * bias, 0.0)
    bias_se = np.sqrt(var / n)
    mse = ss / n
    return ExperimentReport(
        arms=list(arms),
        policy=policy,
        T=T,
        n_trials=n_trials,
        master_seed=master_seed,
        checkpoints=list(checkpoints),
        bias=bias,
        bias_se=bias_se,
        mse=mse,
        joint_freq=hist / n,
    )


@dataclass
class MethodStats:
    method: str
    bias: np.ndarray
    bias_se: np.ndarray
    mse: np.ndarray

    @property
    def pooled_bias(self) -> float:
        return float(self.bias.mean())

    @property
    def pooled_abs_bias(self) -> float:
        return float(np.abs(self.bias).mean())

    @property
    def pooled_mse(self) -> float:
        return float(self.mse.mean())


@dataclass
class EstimatorComparison:
    arms: list[ArmModel]
    policy: PolicyConfig
    T: int
    n_trials: int
    master_seed: int
    methods: dict[str, MethodStats]


def _estimator_chunk(args):
    arms, policy, T, master_seed, methods, cmle_config, lo, hi = args
    from . import estimators as est

    K = len(arms)
    mu = np.array([a.mean for a in arms])
    split = "heldout" in methods
    cd_fit = None
    if "cmle" in methods:
        from .cmle import cd_fit  # imported here so simulate stays numba-free

    s = {m: np.zeros(K) for m in methods}
    ss = {m: np.zeros(K) for m in methods}
    for i in range(lo, hi):
        trace = run_trial(arms, policy, T, master_seed, i, split)
        for m in methods:
            if m == "naive":
                v = est.naive_estimate(trace).estimates
            elif m == "heldout":
                v = est.heldout_estimate(trace).estimates
            elif m == "propensity":
                v = est.propensity_estimate(trace).estimates
            elif m == "cmle":
                v = cd_fit(trace, cmle_config).theta
            else:
                raise ValueError(f"unknown estimator {m!r}")
            d = v - mu
            s[m] += d
            ss[m] += d * d
    return s, ss


def compare_estimators(
    arms: Sequence[ArmModel],
    policy: PolicyConfig,
    T: int,
    n_trials: int,
    methods: Sequence[str] = ("naive",),
    master_seed: int = 0,
    cmle_config=None,
    workers: int = 1,
) -> EstimatorComparison:
    """Bias and MSE of the selected estimators over a shared set of traces."""
    methods = list(methods)
    if cmle_config is None and "cmle" in methods:
        from .cmle import CmleConfig

        cmle_config = CmleConfig()
    chunk = _CMLE_CHUNK if "cmle" in methods else _CHUNK
    jobs = [
        (list(arms), policy, T, master_seed, methods, cmle_config, lo, hi)
        for lo, hi in _chunk_ranges(n_trials, chunk)
    ]
    K = len(arms)
    s = {m: np.zeros(K) for m in methods}
    ss = {m: np.zeros(K) for m in methods}
    for ps, pss in _map_chunks(_estimator_chunk, jobs, workers):
        for m in methods:
            s[m] += ps[m]
            ss[m] += pss[m]
    n = float(n_trials)
    out = {}
    for m in methods:
        bias = s[m] / n
        var = np.maximum(ss[m] / n - bias * bias, 0.0)
        out[m] = MethodStats(m, bias, np.sqrt(var / n), ss[m] / n)
    return EstimatorComparison(list(arms), policy, T, n_trials, master_seed, out)


def _scatter_chunk(args):
    arms, policy, T, t_snapshot, master_seed, arm, lo, hi = args
    mu = arms[arm].mean
    rows = np.empty((hi - lo, 2))
    for i in range(lo, hi):
        trace = run_trial(arms, policy, T, master_seed, i)
        n = int(trace.counts(t_snapshot)[arm])
        rows[i - lo, 0] = trace.samples_by_arm[arm][:n].mean() - mu
        rows[i - lo, 1] = float((trace.selections[t_snapshot:] == arm).sum())
    return rows


def future_samples_scatter(
    arms: Sequence[ArmModel],
    policy: PolicyConfig,
    T: int,
    t_snapshot: int,
    n_trials: int,
    master_seed: int = 0,
    arm: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """Per trial: (bias of the arm's mean at t_snapshot, pulls of the arm
    in rounds t_snapshot+1..T). Negative correlation is the adaptivity
    signature: unlucky early means suppress future sampling.
    """
    K = len(arms)
    if not K <= t_snapshot < T:
        raise ValueError("t_snapshot must lie in [K, T)")
    jobs = [
        (list(arms), policy, T, t_snapshot, master_seed, arm, lo, hi)
        for lo, hi in _chunk_ranges(n_trials, _CHUNK)
    ]
    return np.concatenate(list(_map_chunks(_scatter_chunk, jobs, workers)), axis=0)


# ---------------------------------------------------------------------------
# Exact enumeration for two Bernoulli arms under hard Greedy
# ---------------------------------------------------------------------------

_MAX_ENUM_T = 20


@lru_cache(maxsize=8)
def _bernoulli_states(T: int) -> tuple[tuple[int, int, int, int, int], ...]:
    """Reachable terminal states (n0, s0, n1, s1, multiplicity) at horizon T.

    The greedy selection depends on the state only, through the exact
    integer comparison s0 * n1 >= s1 * n0 (ties to arm 0), so states
    merge and each carries the count of outcome paths reaching it. The
    probability of a state is multiplicity * mu0^s0 (1-mu0)^(n0-s0)
    * mu1^s1 (1-mu1)^(n1-s1).
    """
    states: dict[tuple[int, int, int, int], int] = {(0, 0, 0, 0): 1}
    for r in range(T):
        nxt: dict[tuple[int, int, int, int], int] = {}
        for (n0, s0, n1, s1), c in states.items():
            if r == 0:
                a = 0
            elif r == 1:
                a = 1
            else:
                a = 0 if s0 * n1 >= s1 * n0 else 1
            if a == 0:
                succ = (n0 + 1, s0 + 1, n1, s1)
                fail = (n0 + 1, s0, n1, s1)
            else:
                succ = (n0, s0, n1 + 1, s1 + 1)
                fail = (n0, s0, n1 + 1, s1)
            nxt[succ] = nxt.get(succ, 0) + c
            nxt[fail] = nxt.get(fail, 0) + c
        states = nxt
    return tuple((n0, s0, n1, s1, c) for (n0, s0, n1, s1), c in sorted(states.items()))


def enumerate_bernoulli_exact(mu0: float, mu1: float, T: int) -> np.ndarray:
    """Exact per-arm bias E[sample mean] - mu for K=2 Bernoulli hard Greedy.

    Success outcomes are enumerated by dynamic programming over
    (n0, s0, n1, s1); supported for T <= 20.
    """
    b = bernoulli_bias_grid(np.array([mu0]), np.array([mu1]), T)
    return np.array([b[0][0, 0], b[1][0, 0]])


def bernoulli_bias_t3_closed_form(
    mu0_grid: np.ndarray, mu1_grid: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form T=3 biases on the outer grid.

    With rounds (arm0, arm1, greedy tie-to-0), the third pull hurts arm 0
    only when its first draw failed and arm 1 succeeded, and hurts arm 1
    only when its first draw succeeded and arm 0 failed:
    bias0 = -mu0 (1 - mu0) mu1 / 2 and bias1 = -mu1 (1 - mu1) (1 - mu0) / 2.
    """
    m0 = np.asarray(mu0_grid, dtype=np.float64)[:, None]
    m1 = np.asarray(mu1_grid, dtype=np.float64)[None, :]
    b0 = -0.5 * m0 * (1.0 - m0) * m1
    b1 = -0.5 * m1 * (1.0 - m1) * (1.0 - m0)
    return np.broadcast_to(b0, (m0.shape[0], m1.shape[1])).copy(), np.broadcast_to(
        b1, (m0.shape[0], m1.shape[1])
    ).copy()


def bernoulli_bias_grid(
    mu0_grid: np.ndarray, mu1_grid: np.ndarray, T: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact biases on the outer grid; element [i, j] is (mu0_grid[i], mu1_grid[j])."""
    if T > _MAX_ENUM_T:
        raise StateSpaceTooLarge(f"exact enumeration supports T <= {_MAX_ENUM_T}")
    if T < 2:
        raise ValueError("need T >= 2 so both arms are pulled")
    m0 = np.asarray(mu0_grid, dtype=np.float64)[:, None]
    m1 = np.asarray(mu1_grid, dtype=np.float64)[None, :]
    e0 = np.zeros((m0.shape[0], m1.shape[1]))
    e1 = np.zeros_like(e0)
    for n0, s0, n1, s1, c in _bernoulli_states(T):
        p = (
            float(c)
            * m0**s0
            * (1.0 - m0) ** (n0 - s0)
            * m1**s1
            * (1.0 - m1) ** (n1 - s1)
        )
        e0 += p * (s0 / n0)
        e1 += p * (s1 / n1)
    return e0 - np.broadcast_to(m0, e0.shape), e1 - np.broadcast_to(m1, e1.shape)
