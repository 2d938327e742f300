"""Naive, held-out, and inverse-propensity estimators."""
import numpy as np
import pytest

from banditbias import (
    ArmModel,
    PolicyConfig,
    SplitMissing,
    ZeroPropensity,
    compare_estimators,
    heldout_estimate,
    naive_estimate,
    propensity_estimate,
    run_trial,
)

G2 = [ArmModel("gaussian", 1.0, 1.0), ArmModel("gaussian", 0.75, 1.0)]


def _mc_bias(stats):
    """(bias, se) pooled over arms from a MethodStats record."""
    return stats.bias, stats.bias_se


class TestNaive:
    def test_arithmetic(self):
        arms = [ArmModel("bernoulli", 1.0), ArmModel("bernoulli", 0.0)]
        tr = run_trial(arms, PolicyConfig("greedy"), 5, master_seed=0)
        est = naive_estimate(tr)
        assert est.estimates[0] == 1.0
        assert est.estimates[1] == 0.0
        assert est.effective_counts.sum() == 5.0

    def test_prefix_estimate(self):
        tr = run_trial(G2, PolicyConfig("greedy", gumbel_tau=1.0), 12, master_seed=4)
        est = naive_estimate(tr, t=5)
        n0 = int(tr.counts(5)[0])
        assert est.estimates[0] == tr.samples_by_arm[0][:n0].mean()

    def test_needs_every_arm_pulled(self):
        tr = run_trial(G2, PolicyConfig("greedy"), 6, master_seed=1)
        with pytest.raises(ValueError):
            naive_estimate(tr, t=1)


class TestHeldOut:
    def test_requires_split(self):
        tr = run_trial(G2, PolicyConfig("greedy"), 6, master_seed=2, split=False)
        with pytest.raises(SplitMissing):
            heldout_estimate(tr)

    def test_counts_mirror_main_counts(self):
        tr = run_trial(G2, PolicyConfig("greedy"), 10, master_seed=3, split=True)
        est = heldout_estimate(tr)
        assert np.array_equal(est.effective_counts, tr.counts().astype(float))

    def test_unbiased_under_greedy(self):
        """The twins never feed the decision stats, so no selection bias."""
        cmp = compare_estimators(
            G2, PolicyConfig("greedy"), 10, 20_000, methods=("naive", "heldout"), master_seed=29
        )
        hb, hse = _mc_bias(cmp.methods["heldout"])
        assert np.all(np.abs(hb) < 4.0 * hse)
        nb, nse = _mc_bias(cmp.methods["naive"])
        assert np.all(nb < -4.0 * nse)


class TestPropensity:
    def test_zero_probability_rejected_under_hard_greedy(self):
        tr = run_trial(G2, PolicyConfig("greedy"), 8, master_seed=5)
        with pytest.raises(ZeroPropensity):
            propensity_estimate(tr)

    def test_eps_greedy_floor_allows_weighting(self):
        tr = run_trial(G2, PolicyConfig("eps_greedy", epsilon=0.2), 8, master_seed=6)
        est = propensity_estimate(tr)
        assert est.estimates.shape == (2,)

    def test_manual_recompute_on_one_trace(self):
        pol = PolicyConfig("greedy", gumbel_tau=1.0)
        tr = run_trial(G2, pol, 6, master_seed=7)
        vals = tr.values_in_draw_order()
        acc = np.zeros(2)
        for j in range(4):
            u = tr.decision_stats[j] / pol.gumbel_tau
            p = np.exp(u - u.max())
            p /= p.sum()
            a = tr.selections[2 + j]
            acc[a] += vals[2 + j] / p[a]
        assert np.allclose(propensity_estimate(tr).estimates, acc / 4.0, atol=1e-12)

    def test_unbiased_under_randomized_greedy(self):
        cmp = compare_estimators(
            G2,
            PolicyConfig("greedy", gumbel_tau=1.0),
            8,
            20_000,
            methods=("naive", "propensity"),
            master_seed=31,
        )
        pb, pse = _mc_bias(cmp.methods["propensity"])
        assert np.all(np.abs(pb) < 4.0 * pse)

    def test_no_policy_rounds(self):
        tr = run_trial(G2, PolicyConfig("greedy"), 2, master_seed=8)
        with pytest.raises(ValueError):
            propensity_estimate(tr)

    def test_variance_exceeds_naive(self):
        cmp = compare_estimators(
            G2,
            PolicyConfig("eps_greedy", epsilon=0.1, gumbel_tau=1.0),
            8,
            4000,
            methods=("naive", "propensity"),
            master_seed=37,
        )
        assert cmp.methods["propensity"].pooled_mse > cmp.methods["naive"].pooled_mse
