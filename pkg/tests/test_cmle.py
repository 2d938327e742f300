"""Conditional-likelihood objective, MH sampler, and the CD optimizer."""
import dataclasses
import json
import math

import numpy as np
import pytest

from banditbias import (
    ArmModel,
    CmleConfig,
    Divergence,
    HardMaxTrace,
    MissingPosteriorDraws,
    PolicyConfig,
    cd_fit,
    conditional_loglik_unnormalized,
    data_term_gradient,
    mh_accept_log_ratio,
    mh_step,
    run_trial,
    thompson_conditional_loglik,
)
from banditbias.cmle import _data_loglik, _selection_loglik, _stat_rows_from

G2 = [ArmModel("gaussian", 1.0, 1.0), ArmModel("gaussian", 0.75, 1.0)]
FAST = dict(n_gd_iters=80, mcmc_steps_per_iter=12, burn_in_frac=1.0 / 6.0, r_samples=10)


def _trace(kind="greedy", T=8, tau=1.0, seed=3, trial=0, arms=G2, **kw):
    return run_trial(arms, PolicyConfig(kind, gumbel_tau=tau, **kw), T, seed, trial)


class TestConfig:
    def test_defaults_valid(self):
        cfg = CmleConfig()
        assert cfg.proposal == "independence"
        assert cfg.to_dict()["eta"] == cfg.eta

    @pytest.mark.parametrize(
        "kw",
        [
            {"eta": 0.0},
            {"n_gd_iters": 0},
            {"mcmc_steps_per_iter": 0},
            {"r_samples": 0},
            {"burn_in_frac": 1.0},
            {"burn_in_frac": -0.1},
            {"mcmc_steps_per_iter": 12, "burn_in_frac": 0.5, "r_samples": 10},
            {"proposal": "gibbs"},
            {"walk_std": 0.0},
            {"divergence_bound": 0.0},
        ],
    )
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ValueError):
            CmleConfig(**kw)


class TestObjective:
    def test_gradient_matches_central_differences(self):
        tr = _trace("lil_ucb", T=10, beta=1.0, ucb_eps=0.01, delta=0.005)
        theta = np.array([0.9, 0.6])
        gref = data_term_gradient(tr, theta)
        h = 1e-6
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (
                conditional_loglik_unnormalized(tr, theta + e)
                - conditional_loglik_unnormalized(tr, theta - e)
            ) / (2 * h)
            assert abs(fd - gref[k]) / max(abs(gref[k]), 1e-12) < 1e-6

    def test_selection_terms_do_not_depend_on_theta(self):
        tr = _trace("greedy", T=9)
        x = tr.values_in_draw_order()
        a = conditional_loglik_unnormalized(tr, np.array([1.0, 0.5]))
        b = conditional_loglik_unnormalized(tr, np.array([-2.0, 3.0]))
        da = _data_loglik(tr, np.array([1.0, 0.5]), x)
        db = _data_loglik(tr, np.array([-2.0, 3.0]), x)
        assert abs((a - da) - (b - db)) < 1e-12

    def test_infinite_temperature_limit(self):
        """At huge tau every selection factor approaches the uniform 1/K."""
        tr = _trace("greedy", T=12, tau=1e6)
        x = tr.values_in_draw_order()
        theta = np.array([1.0, 0.75])
        sel = conditional_loglik_unnormalized(tr, theta) - _data_loglik(tr, theta, x)
        assert abs(sel - (tr.T - tr.K) * math.log(0.5)) < 1e-4
        assert np.allclose(
            data_term_gradient(tr, theta),
            [
                (tr.samples_by_arm[0].sum() - tr.counts()[0] * 1.0),
                (tr.samples_by_arm[1].sum() - tr.counts()[1] * 0.75),
            ],
            atol=1e-12,
        )

    def test_single_arm_reduces_to_data_term(self):
        tr = _trace("greedy", T=6, arms=[ArmModel("gaussian", 0.5, 1.0)])
        for theta in ([0.1], [2.3]):
            th = np.array(theta)
            diff = conditional_loglik_unnormalized(tr, th) - _data_loglik(
                tr, th, tr.values_in_draw_order()
            )
            assert abs(diff) < 1e-12

    def test_stat_shift_leaves_selection_terms(self):
        tr = _trace("greedy", T=10)
        rows = _stat_rows_from(tr, tr.values_in_draw_order())
        assert abs(_selection_loglik(tr, rows) - _selection_loglik(tr, rows + 4.2)) < 1e-12

    def test_eps_mixture_floor(self):
        tr = _trace("eps_greedy", T=10, epsilon=0.3)
        rows = np.zeros((tr.T - tr.K, 2))
        rows[:, 0] = 60.0  # softmax saturates to an indicator on arm 0
        expect = sum(
            math.log(0.15 + 0.7 * (1.0 if c == 0 else 0.0)) for c in tr.selections[2:]
        )
        assert abs(_selection_loglik(tr, rows) - expect) < 1e-9

    def test_hard_trace_rejected(self):
        tr = run_trial(G2, PolicyConfig("greedy"), 8, 1, 0)
        with pytest.raises(HardMaxTrace):
            conditional_loglik_unnormalized(tr, np.array([1.0, 0.75]))

    def test_non_gaussian_rejected(self):
        arms = [ArmModel("bernoulli", 0.7), ArmModel("bernoulli", 0.4)]
        tr = run_trial(arms, PolicyConfig("greedy", gumbel_tau=1.0), 8, 1, 0)
        with pytest.raises(ValueError):
            conditional_loglik_unnormalized(tr, np.array([0.7, 0.4]))


class TestThompsonObjective:
    def _ts_trace(self, T=10, prior_var=25.0, arms=G2, seed=5):
        pol = PolicyConfig("thompson", gumbel_tau=1.0, prior_mean=0.0, prior_var=prior_var)
        return run_trial(arms, pol, T, seed, 0)

    def test_theta_gradient_matches_central_differences(self):
        tr = self._ts_trace()
        theta = np.array([0.8, 0.9])
        gref = data_term_gradient(tr, theta)
        h = 1e-6
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (
                thompson_conditional_loglik(tr, theta + e)
                - thompson_conditional_loglik(tr, theta - e)
            ) / (2 * h)
            assert abs(fd - gref[k]) / max(abs(gref[k]), 1e-12) < 1e-6

    def test_sample_derivative_matches_central_differences(self):
        """d/dx_i hits the data term and, through the posterior means, the
        density factors of every later round's recorded draw."""
        tr = self._ts_trace(T=8)
        theta = np.array([1.1, 0.6])
        x = tr.values_in_draw_order().copy()
        lat = tr.decision_stats
        from banditbias.cmle import _thompson_posterior_rows, _thompson_tables

        pm, pv = _thompson_posterior_rows(tr, x)
        _, wfac, _ = _thompson_tables(tr)
        for i in (0, 3, 5):
            a = tr.selections[i]
            j0 = max(0, i + 1 - tr.K)
            grad = -(x[i] - theta[a]) + sum(
                (lat[j, a] - pm[j, a]) / pv[j, a] * wfac[j, a]
                for j in range(j0, tr.T - tr.K)
            )
            h = 1e-5
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (
                thompson_conditional_loglik(tr, theta, xp)
                - thompson_conditional_loglik(tr, theta, xm)
            ) / (2 * h)
            assert abs(fd - grad) / max(abs(grad), 1e-9) < 1e-5

    def test_flat_prior_single_arm_reduction(self):
        """With one arm and a flat prior the posterior factors carry the
        running mean and sigma^2/N, and no selection competition remains."""
        arm = [ArmModel("gaussian", 0.5, 1.0)]
        tr = self._ts_trace(T=12, prior_var=1e8, arms=arm)
        theta = np.array([0.5])
        x = tr.values_in_draw_order()
        lat = tr.decision_stats
        phi = thompson_conditional_loglik(tr, theta) - _data_loglik(tr, theta, x)
        expect = 0.0
        run_s, run_n = x[0], 1
        for j in range(tr.T - 1):
            m, v = run_s / run_n, 1.0 / run_n
            expect += -0.5 * (lat[j, 0] - m) ** 2 / v - 0.5 * math.log(2 * math.pi * v)
            run_s += x[j + 1]
            run_n += 1
        assert abs(phi - expect) < 1e-6

    def test_missing_draws_rejected(self):
        tr = self._ts_trace()
        broken = dataclasses.replace(tr, decision_stats=None)
        with pytest.raises(MissingPosteriorDraws):
            thompson_conditional_loglik(broken, np.array([1.0, 0.75]))
        with pytest.raises(MissingPosteriorDraws):
            cd_fit(broken, CmleConfig(**FAST))


def _rejection_sample(trace, theta, n_prop, rng):
    """Exact draws from the selection-conditioned density for K=2 traces.

    Proposes from the data term; accepts with the product of selection
    probabilities, which is a valid envelope since each factor is <= 1.
    """
    K, T = trace.K, trace.T
    sd = trace.arms[0].obs_std
    tau = trace.policy.gumbel_tau
    mu = theta[trace.selections]
    x = rng.normal(mu, sd, size=(n_prop, T))
    onehot = np.zeros((T, K))
    onehot[np.arange(T), trace.selections] = 1.0
    cs = np.cumsum(x[:, :, None] * onehot[None], axis=1)
    cn = np.cumsum(onehot, axis=0)[None]
    logp = np.zeros(n_prop)
    for j in range(T - K):
        stats = cs[:, K + j - 1, :] / cn[:, K + j - 1, :]
        z = stats / tau
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        logp += np.log(p[:, trace.selections[K + j]])
    keep = np.log(rng.random(n_prop)) < logp
    return x[keep]


class TestMhStep:
    def test_flat_selection_accepts_everything(self):
        tr = _trace("greedy", T=10, tau=1e6)
        x0 = tr.values_in_draw_order()
        _, _, acc = mh_step(x0, tr, np.array([1.0, 0.75]), np.random.default_rng(0))
        assert acc == tr.T

    def test_sweep_preserves_conditioning(self):
        tr = _trace("greedy", T=9)
        sel_before = tr.selections.copy()
        x1, lat, acc = mh_step(tr.values_in_draw_order(), tr, np.array([1.0, 0.7]),
                               np.random.default_rng(1))
        assert np.array_equal(tr.selections, sel_before)
        assert x1.shape == (9,)
        assert lat is None
        assert 0 <= acc <= 9

    def test_bad_proposal_name(self):
        tr = _trace("greedy", T=6)
        with pytest.raises(ValueError):
            mh_step(tr.values_in_draw_order(), tr, np.array([1.0, 0.7]),
                    np.random.default_rng(0), proposal="slice")

    @pytest.mark.parametrize("proposal,sweeps", [("independence", 10_000), ("random_walk", 10_000)])
    def test_stationary_means_match_rejection_sampler(self, proposal, sweeps):
        tr = _trace("greedy", T=4, seed=12)
        theta = np.array([1.0, 0.75])
        rng = np.random.default_rng(99)
        ref = _rejection_sample(tr, theta, 400_000, rng)
        assert len(ref) > 20_000
        x = ref[0]
        means = np.zeros(4)
        kept = 0
        for s in range(sweeps):
            x, _, _ = mh_step(x, tr, theta, rng, proposal=proposal, walk_std=0.8)
            if s >= sweeps // 5:
                means += x
                kept += 1
        means /= kept
        se = ref.std(axis=0, ddof=1) / math.sqrt(len(ref))
        # chain SE dominates; scale the rejection SE by the sweep/sample ratio
        chain_se = ref.std(axis=0, ddof=1) / math.sqrt(kept / 8.0)
        tol = 4.0 * np.sqrt(se**2 + chain_se**2)
        assert np.all(np.abs(means - ref.mean(axis=0)) < tol)

    def test_thompson_sweep_shapes(self):
        pol = PolicyConfig("thompson", gumbel_tau=1.0, prior_mean=0.0, prior_var=25.0)
        tr = run_trial(G2, pol, 7, 4, 0)
        x, lat, acc = mh_step(tr.values_in_draw_order(), tr, np.array([1.0, 0.75]),
                              np.random.default_rng(2))
        assert x.shape == (7,)
        assert lat.shape == (5, 2)
        assert acc > 0


class TestAcceptRatioHelper:
    def test_three_state_detailed_balance(self):
        pi = np.array([0.2, 0.5, 0.3])
        q = np.array([0.5, 0.25, 0.25])  # independence proposal over states
        P = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                if i == j:
                    continue
                a = min(
                    1.0,
                    math.exp(
                        mh_accept_log_ratio(
                            math.log(pi[j]), math.log(pi[i]), math.log(q[j]), math.log(q[i])
                        )
                    ),
                )
                P[i, j] = q[j] * a
            P[i, i] = 1.0 - P[i].sum()
        for i in range(3):
            for j in range(3):
                assert abs(pi[i] * P[i, j] - pi[j] * P[j, i]) < 1e-10


class TestCdFit:
    def test_single_arm_recovers_sample_mean(self):
        tr = _trace("greedy", T=40, arms=[ArmModel("gaussian", 0.5, 1.0)], seed=7)
        naive = tr.samples_by_arm[0].mean()
        res = cd_fit(tr, CmleConfig(eta=1e-6, n_gd_iters=300, mcmc_steps_per_iter=12,
                                    burn_in_frac=1.0 / 6.0, r_samples=10))
        assert abs(res.theta[0] - naive) < 1e-4
        assert np.max(np.abs(res.trajectory - naive)) < 1e-4

    def test_trajectory_contract(self):
        tr = _trace("greedy", T=8)
        cfg = CmleConfig(**FAST)
        res = cd_fit(tr, cfg)
        assert res.trajectory.shape == (cfg.n_gd_iters + 1, 2)
        naive = [s.mean() for s in tr.samples_by_arm]
        assert np.allclose(res.trajectory[0], naive, atol=1e-15)
        assert np.all(np.isfinite(res.theta))
        assert 0.0 < res.accept_rate <= 1.0
        assert np.isfinite(res.final_grad_norm)

    def test_deterministic(self):
        tr = _trace("eps_greedy", T=10, epsilon=0.1)
        a = cd_fit(tr, CmleConfig(**FAST))
        b = cd_fit(tr, CmleConfig(**FAST))
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.trajectory, b.trajectory)

    def test_divergence_guard(self):
        tr = _trace("greedy", T=8)
        with pytest.raises(Divergence):
            cd_fit(tr, CmleConfig(eta=5e4, n_gd_iters=200, mcmc_steps_per_iter=12,
                                  burn_in_frac=1.0 / 6.0, r_samples=10,
                                  divergence_bound=50.0))

    def test_hard_trace_rejected(self):
        tr = run_trial(G2, PolicyConfig("greedy"), 8, 1, 0)
        with pytest.raises(HardMaxTrace):
            cd_fit(tr, CmleConfig(**FAST))

    def test_random_walk_not_compiled(self):
        tr = _trace("greedy", T=8)
        with pytest.raises(ValueError):
            cd_fit(tr, CmleConfig(proposal="random_walk", **FAST))

    def test_zero_update_at_self_consistent_point(self):
        """A trace observing exactly the chain's own stationary per-arm means
        sits at the estimator's fixed point, so the average CD update is zero.

        The self-consistent theta (chain mean law equals theta) is found by
        damped iteration with the readable sampler before handing the
        synthetic trace to cd_fit.
        """
        tr = _trace("greedy", T=4, seed=12)
        rng = np.random.default_rng(31)
        counts = tr.counts()

        def chain_mean_sums(theta, sweeps, burn):
            x = tr.values_in_draw_order()
            acc = np.zeros(2)
            kept = 0
            for s in range(sweeps):
                x, _, _ = mh_step(x, tr, theta, rng)
                if s >= burn:
                    for k in range(2):
                        acc[k] += x[tr.selections == k].sum()
                    kept += 1
            return acc / kept

        theta = np.array([s.mean() for s in tr.samples_by_arm])
        for _ in range(5):
            theta = theta + 0.7 * (chain_mean_sums(theta, 3000, 500) / counts - theta)
        sums = chain_mean_sums(theta, 12_000, 1000)
        synthetic = dataclasses.replace(
            tr, samples_by_arm=[np.full(counts[k], sums[k] / counts[k]) for k in range(2)]
        )
        cfg = CmleConfig(eta=1e-3, n_gd_iters=800, mcmc_steps_per_iter=12,
                         burn_in_frac=1.0 / 6.0, r_samples=10)
        res = cd_fit(synthetic, cfg)
        eta_step = cfg.eta * 1.0 / tr.T
        mean_grad = (res.trajectory[-1] - res.trajectory[0]) / (cfg.n_gd_iters * eta_step)
        assert np.all(np.abs(mean_grad) < 0.4)

    def test_kernel_chain_matches_reference_chain(self):
        """The compiled sweep and the readable sweep sample the same law:
        compare long-run per-arm sums at a frozen parameter."""
        tr = _trace("greedy", T=6, seed=21)
        theta0 = np.array([s.mean() for s in tr.samples_by_arm])
        rng = np.random.default_rng(8)
        x = tr.values_in_draw_order()
        ref = np.zeros(2)
        kept = 0
        per_sweep = []
        for s in range(4000):
            x, _, _ = mh_step(x, tr, theta0, rng)
            if s >= 500:
                row = np.array([x[tr.selections == k].sum() for k in range(2)])
                per_sweep.append(row)
                ref += row
                kept += 1
        ref /= kept
        per_sweep = np.asarray(per_sweep)

        cfg = CmleConfig(eta=1e-9, n_gd_iters=500, mcmc_steps_per_iter=12,
                         burn_in_frac=1.0 / 6.0, r_samples=10)
        res = cd_fit(tr, cfg)
        eta_step = cfg.eta * 1.0 / tr.T
        grads = np.diff(res.trajectory, axis=0) / eta_step
        obs_sums = np.array([s.sum() for s in tr.samples_by_arm])
        kernel_mean = obs_sums - grads.mean(axis=0)

        se_ref = per_sweep.std(axis=0, ddof=1) / math.sqrt(kept / 8.0)
        se_ker = per_sweep.std(axis=0, ddof=1) / math.sqrt(cfg.n_gd_iters * cfg.r_samples / 8.0)
        tol = 4.0 * np.sqrt(se_ref**2 + se_ker**2)
        assert np.all(np.abs(kernel_mean - ref) < tol)

    def test_serialization(self):
        tr = _trace("greedy", T=8)
        res = cd_fit(tr, CmleConfig(**FAST))
        blob = json.loads(res.to_json())
        assert blob["theta"] == list(res.theta)
        assert blob["config"]["n_gd_iters"] == 80
        csv = res.trajectory_csv()
        lines = csv.strip().split("\n")
        assert lines[0] == "iteration,theta_0,theta_1"
        assert len(lines) == 82
        first = lines[1].split(",")
        assert float(first[1]) == res.trajectory[0, 0]
