"""Compiled Metropolis-Hastings sweep kernels for the contrastive-divergence fit.

State layout shared by both kernels: candidate samples x live in draw
order; decision row j (of J = T - K) holds the stats that selected round
K + j. A sample site i only influences rows j >= i + 1 - K, always a
contiguous suffix, so per-site acceptance ratios are evaluated
incrementally against maintained per-row softmax tables.

Randomness comes from an in-kernel splitmix64 counter generator seeded
per trial, which keeps chains reproducible under any process scheduling.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO_PI = 6.283185307179586


@njit(cache=True)
def _next_u64(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True)
def _uniform(state):
    # strictly inside (0, 1) so log() is always finite
    return (float(_next_u64(state) >> _S11) + 0.5) * (2.0**-53)


@njit(cache=True)
def _normal(state):
    u1 = _uniform(state)
    u2 = _uniform(state)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)


@njit(cache=True)
def _rebuild_softmax_tables(x, a, offs, tau, K, U, E, D, C):
    """Fill the per-row stat/exp tables from the candidate samples."""
    T = x.shape[0]
    J = U.shape[0]
    run_s = np.zeros(K)
    run_n = np.zeros(K)
    for r in range(T):
        if r >= K:
            j = r - K
            for k in range(K):
                U[j, k] = run_s[k] / run_n[k] + offs[j, k]
        run_s[a[r]] += x[r]
        run_n[a[r]] += 1.0
    for j in range(J):
        c = U[j, 0]
        for k in range(1, K):
            if U[j, k] > c:
                c = U[j, k]
        C[j] = c
        d = 0.0
        for k in range(K):
            e = math.exp((U[j, k] - c) / tau)
            E[j, k] = e
            d += e
        D[j] = d


@njit(cache=True)
def softmax_chain_sweeps(
    x, a, inv_cnt, offs, chosen, theta, sigma, tau, eps_mix,
    n_sweeps, collect_from, sums_out, rng_state,
):
    """Run n_sweeps single-site MH sweeps for softmax-family policies.

    eps_mix < 0 selects the pure softmax selection law; otherwise it is
    the eps-Greedy mixture rate. Sweeps with index >= collect_from
    accumulate per-arm sums of x into sums_out. Mutates x, sums_out and
    rng_state in place; returns (n_accept, n_proposals, n_retained).
    """
    T = x.shape[0]
    J = inv_cnt.shape[0]
    K = theta.shape[0]
    U = np.empty((J, K))
    E = np.empty((J, K))
    D = np.empty(J)
    C = np.empty(J)
    _rebuild_softmax_tables(x, a, offs, tau, K, U, E, D, C)
    scr_u = np.empty(J)
    scr_e = np.empty(J)
    uni = eps_mix / K if eps_mix >= 0.0 else 0.0
    rest = 1.0 - eps_mix if eps_mix >= 0.0 else 1.0
    n_acc = 0
    n_prop = 0
    n_ret = 0
    for s in range(n_sweeps):
        for i in range(T):
            k = a[i]
            j0 = i + 1 - K
            if j0 < 0:
                j0 = 0
            xp = theta[k] + sigma * _normal(rng_state)
            n_prop += 1
            if j0 >= J:
                # no selection factor sees this site; always accepted
                x[i] = xp
                n_acc += 1
                continue
            delta = xp - x[i]
            logr = 0.0
            for j in range(j0, J):
                du = delta * inv_cnt[j, k]
                unew = U[j, k] + du
                enew = math.exp((unew - C[j]) / tau)
                eold = E[j, k]
                c = chosen[j]
                if eps_mix < 0.0:
                    if c == k:
                        logr += du / tau
                    logr -= math.log1p((enew - eold) / D[j])
                else:
                    dnew = D[j] + (enew - eold)
                    ec_new = enew if c == k else E[j, c]
                    logr += math.log(uni + rest * ec_new / dnew)
                    logr -= math.log(uni + rest * E[j, c] / D[j])
                scr_u[j] = unew
                scr_e[j] = enew
            if logr >= 0.0 or math.log(_uniform(rng_state)) < logr:
                n_acc += 1
                x[i] = xp
                for j in range(j0, J):
                    D[j] += scr_e[j] - E[j, k]
                    U[j, k] = scr_u[j]
                    E[j, k] = scr_e[j]
        if s >= collect_from:
            n_ret += 1
            for i in range(T):
                sums_out[a[i]] += x[i]
    return n_acc, n_prop, n_ret


@njit(cache=True)
def _rebuild_posterior_means(x, a, wfac, mu0_term, K, pm):
    T = x.shape[0]
    run_s = np.zeros(K)
    for r in range(T):
        if r >= K:
            j = r - K
            for k in range(K):
                pm[j, k] = mu0_term[j, k] + run_s[k] * wfac[j, k]
        run_s[a[r]] += x[r]


@njit(cache=True)
def thompson_chain_sweeps(
    x, mhat, a, chosen, pv, sd, wfac, mu0_term, theta, sigma, tau,
    n_sweeps, collect_from, sums_out, rng_state,
):
    """Thompson variant: sample sites move the posterior-mean factors of
    the recorded-draw latents; latent sites move the softmax factors.
    Mutates x, mhat, sums_out, rng_state; returns (n_accept, n_proposals,
    n_retained).
    """
    T = x.shape[0]
    J = mhat.shape[0]
    K = theta.shape[0]
    pm = np.empty((J, K))
    _rebuild_posterior_means(x, a, wfac, mu0_term, K, pm)
    E = np.empty((J, K))
    D = np.empty(J)
    C = np.empty(J)
    for j in range(J):
        c = mhat[j, 0]
        for k in range(1, K):
            if mhat[j, k] > c:
                c = mhat[j, k]
        C[j] = c
        d = 0.0
        for k in range(K):
            e = math.exp((mhat[j, k] - c) / tau)
            E[j, k] = e
            d += e
        D[j] = d
    scr_pm = np.empty(J)
    n_acc = 0
    n_prop = 0
    n_ret = 0
    for s in range(n_sweeps):
        for i in range(T):
            k = a[i]
            j0 = i + 1 - K
            if j0 < 0:
                j0 = 0
            xp = theta[k] + sigma * _normal(rng_state)
            n_prop += 1
            if j0 >= J:
                x[i] = xp
                n_acc += 1
                continue
            delta = xp - x[i]
            logr = 0.0
            for j in range(j0, J):
                pnew = pm[j, k] + delta * wfac[j, k]
                r_old = mhat[j, k] - pm[j, k]
                r_new = mhat[j, k] - pnew
                logr += (r_old * r_old - r_new * r_new) / (2.0 * pv[j, k])
                scr_pm[j] = pnew
            if logr >= 0.0 or math.log(_uniform(rng_state)) < logr:
                n_acc += 1
                x[i] = xp
                for j in range(j0, J):
                    pm[j, k] = scr_pm[j]
        for j in range(J):
            for k in range(K):
                mp = pm[j, k] + sd[j, k] * _normal(rng_state)
                n_prop += 1
                enew = math.exp((mp - C[j]) / tau)
                eold = E[j, k]
                logr = -math.log1p((enew - eold) / D[j])
                if chosen[j] == k:
                    logr += (mp - mhat[j, k]) / tau
                if logr >= 0.0 or math.log(_uniform(rng_state)) < logr:
                    n_acc += 1
                    mhat[j, k] = mp
                    D[j] += enew - eold
                    E[j, k] = enew
        if s >= collect_from:
            n_ret += 1
            for i in range(T):
                sums_out[a[i]] += x[i]
    return n_acc, n_prop, n_ret
