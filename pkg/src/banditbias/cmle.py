"""Conditional maximum-likelihood debiasing via contrastive divergence.

The conditional likelihood of Gaussian arm means theta given a
Gumbel-randomized trace factors into a theta-dependent data term, the
per-round softmax selection probabilities (theta-free given the candidate
samples), and an intractable normalizer that is never computed.
Gradient ascent uses the contrastive-divergence estimate: the data-term
gradient at the observed samples minus its average over states of a
persistent Metropolis-Hastings chain targeting the conditional density of
the samples given the selection sequence.

Thompson traces carry latent posterior draws: the recorded draws enter the
softmax factors directly, and Normal densities tie them to the posterior
means recomputed from the candidate samples (never from theta).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .core import MCMC, BanditBiasError, GAUSSIAN, Trace, substream
from .policies import EPS_GREEDY, LIL_UCB, THOMPSON, exploration_bonus


class HardMaxTrace(BanditBiasError):
    """cMLE needs Gumbel-randomized collection; hard argmax has no density."""


class MissingPosteriorDraws(BanditBiasError):
    """Thompson conditional likelihood needs the recorded posterior draws."""


class Divergence(BanditBiasError):
    """Gradient ascent left the configured trust region."""


@dataclass(frozen=True)
class CmleConfig:
    """Contrastive-divergence fit settings.

    eta is a relative rate; every coordinate steps by eta * sigma^2 / T
    per iteration. The flat step doubles as a stabiliser: an arm's
    sufficient statistic is a sum over its pulls, so heavily pulled arms
    contract quickly while an arm pulled once or twice moves a bounded
    total distance over the run and cannot chase the heavy-tailed fits
    such traces otherwise admit. mcmc_steps_per_iter sweeps run per
    gradient iteration on a persistent chain; floor(burn_in_frac * steps)
    are burn-in and the last r_samples states are averaged for the
    gradient.
    """

    eta: float = 0.05
    n_gd_iters: int = 600
    mcmc_steps_per_iter: int = 30
    burn_in_frac: float = 0.5
    r_samples: int = 10
    proposal: str = "independence"
    walk_std: float = 0.5
    divergence_bound: float = 1e3

    def __post_init__(self) -> None:
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.n_gd_iters < 1 or self.mcmc_steps_per_iter < 1 or self.r_samples < 1:
            raise ValueError("iteration counts must be positive")
        if not 0.0 <= self.burn_in_frac < 1.0:
            raise ValueError("burn_in_frac must lie in [0, 1)")
        burn = int(self.mcmc_steps_per_iter * self.burn_in_frac)
        if self.mcmc_steps_per_iter - burn < self.r_samples:
            raise ValueError("r_samples exceeds the post-burn-in sweep count")
        if self.proposal not in ("independence", "random_walk"):
            raise ValueError("proposal must be 'independence' or 'random_walk'")
        if self.walk_std <= 0.0:
            raise ValueError("walk_std must be positive")
        if self.divergence_bound <= 0.0:
            raise ValueError("divergence_bound must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CmleResult:
    theta: np.ndarray
    trajectory: np.ndarray  # (n_gd_iters + 1, K); row 0 is the naive init
    accept_rate: float
    final_grad_norm: float
    config: CmleConfig

    def to_json(self) -> str:
        return json.dumps(
            {
                "theta": self.theta.tolist(),
                "accept_rate": self.accept_rate,
                "final_grad_norm": self.final_grad_norm,
                "config": self.config.to_dict(),
                "trajectory": self.trajectory.tolist(),
            }
        )

    def trajectory_csv(self) -> str:
        """One row per gradient iteration: iteration, theta_0..theta_{K-1}."""
        K = self.trajectory.shape[1]
        lines = ["iteration," + ",".join(f"theta_{k}" for k in range(K))]
        for it, row in enumerate(self.trajectory):
            lines.append(f"{it}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def _require_fittable(trace: Trace) -> None:
    if not trace.policy.randomized:
        raise HardMaxTrace(
            "trace was collected with hard argmax; selection factors are "
            "indicators and the conditional likelihood has no gradient"
        )
    if any(a.family != GAUSSIAN for a in trace.arms):
        raise ValueError("conditional MLE is implemented for gaussian arms")


def _counts_before_rows(trace: Trace) -> np.ndarray:
    """(J, K) pull counts entering each decision row."""
    K, T = trace.K, trace.T
    out = np.empty((T - K, K), dtype=np.int64)
    run = np.zeros(K, dtype=np.int64)
    for r in range(T):
        if r >= K:
            out[r - K] = run
        run[trace.selections[r]] += 1
    return out


def _stat_offsets(trace: Trace, counts_rows: np.ndarray) -> np.ndarray:
    """theta-free additive stat offsets per decision row (lil'UCB bonus)."""
    if trace.policy.kind != LIL_UCB:
        return np.zeros_like(counts_rows, dtype=np.float64)
    table = np.concatenate(
        ([np.nan], exploration_bonus(trace.policy, np.arange(1, trace.T + 1)))
    )
    return table[counts_rows]


def _stat_rows_from(trace: Trace, x: np.ndarray) -> np.ndarray:
    """Decision-stat rows recomputed from candidate samples in draw order."""
    K, T = trace.K, trace.T
    counts_rows = _counts_before_rows(trace)
    offs = _stat_offsets(trace, counts_rows)
    rows = np.empty((T - K, K))
    run_s = np.zeros(K)
    run_n = np.zeros(K, dtype=np.int64)
    for r in range(T):
        if r >= K:
            rows[r - K] = run_s / run_n
        run_s[trace.selections[r]] += x[r]
        run_n[trace.selections[r]] += 1
    return rows + offs


def _selection_loglik(trace: Trace, stat_rows: np.ndarray) -> float:
    policy = trace.policy
    tau = policy.gumbel_tau
    chosen = trace.selections[trace.K:]
    z = stat_rows / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    pc = p[np.arange(len(chosen)), chosen]
    if policy.kind == EPS_GREEDY:
        pc = policy.epsilon / trace.K + (1.0 - policy.epsilon) * pc
    return float(np.log(pc).sum())


def _data_loglik(trace: Trace, theta: np.ndarray, x: np.ndarray) -> float:
    sigma = trace.arms[0].obs_std
    mu = theta[trace.selections]
    return float(
        (-0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma * math.sqrt(2.0 * math.pi))).sum()
    )


def data_term_gradient(trace: Trace, theta: np.ndarray) -> np.ndarray:
    """Analytic gradient of the data term at the observed samples:
    sum_m (X_m^(k) - theta_k) / sigma^2 per arm."""
    sigma = trace.arms[0].obs_std
    counts = trace.counts()
    sums = np.array([s.sum() for s in trace.samples_by_arm])
    return (sums - counts * theta) / (sigma * sigma)


def conditional_loglik_unnormalized(
    trace: Trace, theta: np.ndarray, x: np.ndarray | None = None
) -> float:
    """Log of the unnormalized conditional likelihood (normalizer omitted).

    x defaults to the observed samples in draw order; passing a candidate
    vector evaluates the MCMC target density at that state. Thompson
    traces are delegated to thompson_conditional_loglik.
    """
    _require_fittable(trace)
    theta = np.asarray(theta, dtype=np.float64)
    if trace.policy.kind == THOMPSON:
        return thompson_conditional_loglik(trace, theta, x)
    x = trace.values_in_draw_order() if x is None else np.asarray(x, dtype=np.float64)
    return _data_loglik(trace, theta, x) + _selection_loglik(trace, _stat_rows_from(trace, x))


def _thompson_tables(trace: Trace):
    counts_rows = _counts_before_rows(trace)
    policy = trace.policy
    obs_var = trace.arms[0].obs_std ** 2
    pv = 1.0 / (1.0 / policy.prior_var + counts_rows / obs_var)
    wfac = pv / obs_var
    mu0_term = (policy.prior_mean / policy.prior_var) * pv
    return pv, wfac, mu0_term


def _thompson_posterior_rows(trace: Trace, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(pm, pv) rows of the per-round posteriors from candidate samples."""
    pv, wfac, mu0_term = _thompson_tables(trace)
    K, T = trace.K, trace.T
    run_s = np.zeros(K)
    pm = np.empty_like(pv)
    for r in range(T):
        if r >= K:
            j = r - K
            pm[j] = mu0_term[j] + run_s * wfac[j]
        run_s[trace.selections[r]] += x[r]
    return pm, pv


def thompson_conditional_loglik(
    trace: Trace,
    theta: np.ndarray,
    x: np.ndarray | None = None,
    latents: np.ndarray | None = None,
) -> float:
    """Unnormalized conditional log-likelihood for a Thompson trace.

    Three groups of factors: the Gaussian data term (the only place theta
    appears), Normal densities tying each latent posterior draw to the
    posterior computed from the candidate samples, and the softmax
    selection probabilities of the recorded (or candidate) draws.
    """
    _require_fittable(trace)
    if trace.policy.kind != THOMPSON:
        raise ValueError("not a thompson trace")
    if trace.decision_stats is None or not np.all(np.isfinite(trace.decision_stats)):
        raise MissingPosteriorDraws("trace carries no usable posterior draws")
    theta = np.asarray(theta, dtype=np.float64)
    x = trace.values_in_draw_order() if x is None else np.asarray(x, dtype=np.float64)
    latents = trace.decision_stats if latents is None else np.asarray(latents, dtype=np.float64)
    pm, pv = _thompson_posterior_rows(trace, x)
    resid = latents - pm
    phi = float((-0.5 * resid * resid / pv - 0.5 * np.log(2.0 * math.pi * pv)).sum())
    return _data_loglik(trace, theta, x) + phi + _selection_loglik(trace, latents)


def mh_accept_log_ratio(
    log_target_new: float, log_target_old: float,
    log_proposal_new: float, log_proposal_old: float,
) -> float:
    """Log acceptance ratio of Metropolis-Hastings with an independence
    proposal: log pi(new) - log pi(old) + log q(old) - log q(new)."""
    return (log_target_new - log_target_old) + (log_proposal_old - log_proposal_new)


def mh_step(
    x: np.ndarray,
    trace: Trace,
    theta: np.ndarray,
    rng: np.random.Generator,
    latents: np.ndarray | None = None,
    proposal: str = "independence",
    walk_std: float = 0.5,
) -> tuple[np.ndarray, np.ndarray | None, int]:
    """One reference MH sweep over every sample slot (and, for Thompson,
    every latent draw slot), by full target re-evaluation.

    This is the readable counterpart of the compiled kernels used by
    cd_fit; it exists for small cases and for validating the kernels
    against an independent computation of the same chain law. The
    independence proposal draws a site from its prior factor; the
    random-walk proposal perturbs it by Normal(0, walk_std^2). Returns
    (new samples, new latents, accepted count).
    """
    _require_fittable(trace)
    if proposal not in ("independence", "random_walk"):
        raise ValueError("proposal must be 'independence' or 'random_walk'")
    theta = np.asarray(theta, dtype=np.float64)
    sigma = trace.arms[0].obs_std
    x = np.asarray(x, dtype=np.float64).copy()
    thompson = trace.policy.kind == THOMPSON
    if thompson:
        latents = (trace.decision_stats if latents is None else latents).copy()

    def target(xv, lv):
        if thompson:
            return thompson_conditional_loglik(trace, theta, xv, lv)
        return conditional_loglik_unnormalized(trace, theta, xv)

    def logpdf(v, mean, std):
        return -0.5 * ((v - mean) / std) ** 2 - math.log(std * math.sqrt(2.0 * math.pi))

    walk = proposal == "random_walk"
    n_accept = 0
    cur = target(x, latents)
    for i in range(trace.T):
        k = trace.selections[i]
        old = x[i]
        xp = old + rng.normal(0.0, walk_std) if walk else rng.normal(theta[k], sigma)
        x[i] = xp
        new = target(x, latents)
        if walk:
            logr = mh_accept_log_ratio(new, cur, 0.0, 0.0)
        else:
            logr = mh_accept_log_ratio(
                new, cur, logpdf(xp, theta[k], sigma), logpdf(old, theta[k], sigma)
            )
        if math.log(rng.random()) < logr:
            cur = new
            n_accept += 1
        else:
            x[i] = old
    if thompson:
        pm, pv = _thompson_posterior_rows(trace, x)
        sd = np.sqrt(pv)
        for j in range(trace.T - trace.K):
            for k in range(trace.K):
                old = latents[j, k]
                mp = old + rng.normal(0.0, walk_std) if walk else rng.normal(pm[j, k], sd[j, k])
                latents[j, k] = mp
                new = target(x, latents)
                if walk:
                    logr = mh_accept_log_ratio(new, cur, 0.0, 0.0)
                else:
                    logr = mh_accept_log_ratio(
                        new, cur, logpdf(mp, pm[j, k], sd[j, k]), logpdf(old, pm[j, k], sd[j, k])
                    )
                if math.log(rng.random()) < logr:
                    cur = new
                    n_accept += 1
                else:
                    latents[j, k] = old
    return x, (latents if thompson else None), n_accept


def cd_fit(trace: Trace, config: CmleConfig | None = None) -> CmleResult:
    """Contrastive-divergence fit of the conditional MLE (Algorithm: start
    at the naive means, repeat gradient steps of the data term at the
    observed trace minus its average over retained states of a persistent
    MH chain on candidate samples).
    """
    from . import _cd_kernel as k

    config = CmleConfig() if config is None else config
    _require_fittable(trace)
    if config.proposal != "independence":
        raise ValueError("cd_fit's compiled kernels implement the independence proposal")
    policy = trace.policy
    K, T = trace.K, trace.T
    sigma = trace.arms[0].obs_std
    obs_var = sigma * sigma
    counts = trace.counts().astype(np.float64)
    obs_sums = np.array([s.sum() for s in trace.samples_by_arm])
    theta = obs_sums / counts
    x = trace.values_in_draw_order()
    a = trace.selections.astype(np.int64)
    chosen = a[K:].copy()

    thompson = policy.kind == THOMPSON
    if thompson:
        if trace.decision_stats is None or not np.all(np.isfinite(trace.decision_stats)):
            raise MissingPosteriorDraws("trace carries no usable posterior draws")
        pv, wfac, mu0_term = _thompson_tables(trace)
        sd = np.sqrt(pv)
        latents = trace.decision_stats.copy()
    else:
        counts_rows = _counts_before_rows(trace)
        inv_cnt = 1.0 / counts_rows
        offs = _stat_offsets(trace, counts_rows)
        eps_mix = policy.epsilon if policy.kind == EPS_GREEDY else -1.0

    seed_rng = substream(trace.master_seed, trace.trial_index, MCMC)
    rng_state = np.array([seed_rng.integers(1, 2**62)], dtype=np.uint64)

    eta_step = config.eta * obs_var / T
    collect_from = config.mcmc_steps_per_iter - config.r_samples
    traj = np.empty((config.n_gd_iters + 1, K))
    traj[0] = theta
    sums_out = np.zeros(K)
    tot_acc = 0
    tot_prop = 0
    for it in range(config.n_gd_iters):
        sums_out[:] = 0.0
        if thompson:
            acc, prop, nret = k.thompson_chain_sweeps(
                x, latents, a, chosen, pv, sd, wfac, mu0_term, theta, sigma,
                policy.gumbel_tau, config.mcmc_steps_per_iter, collect_from,
                sums_out, rng_state,
            )
        else:
            acc, prop, nret = k.softmax_chain_sweeps(
                x, a, inv_cnt, offs, chosen, theta, sigma, policy.gumbel_tau,
                eps_mix, config.mcmc_steps_per_iter, collect_from, sums_out,
                rng_state,
            )
        tot_acc += acc
        tot_prop += prop
        grad = (obs_sums - sums_out / nret) / obs_var
        theta = theta + eta_step * grad
        if np.max(np.abs(theta)) > config.divergence_bound:
            raise Divergence(f"theta left [-{config.divergence_bound}, {config.divergence_bound}]")
        traj[it + 1] = theta
    return CmleResult(
        theta=theta,
        trajectory=traj,
        accept_rate=tot_acc / max(tot_prop, 1),
        final_grad_norm=float(np.linalg.norm(grad)),
        config=config,
    )
