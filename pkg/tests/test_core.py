"""Streams, arm models, and the trace record."""
import numpy as np
import pytest

from banditbias import (
    ARM_DRAW,
    BERNOULLI,
    GAUSSIAN,
    GUMBEL_NOISE,
    HELD_OUT,
    MCMC,
    POLICY_NOISE,
    ArmModel,
    PolicyConfig,
    Trace,
    TraceSchemaError,
    UndefinedMean,
    draw_sample,
    run_trial,
    sample_mean,
    substream,
)


class TestSubstream:
    def test_same_key_same_sequence(self):
        a = substream(7, 3, ARM_DRAW, 1).normal(size=5)
        b = substream(7, 3, ARM_DRAW, 1).normal(size=5)
        assert np.array_equal(a, b)

    def test_distinct_keys_differ(self):
        base = substream(7, 3, ARM_DRAW).normal(size=4)
        for other in (
            substream(8, 3, ARM_DRAW),
            substream(7, 4, ARM_DRAW),
            substream(7, 3, POLICY_NOISE),
            substream(7, 3, GUMBEL_NOISE),
            substream(7, 3, HELD_OUT),
            substream(7, 3, MCMC),
            substream(7, 3, ARM_DRAW, 0),
        ):
            assert not np.array_equal(base, other.normal(size=4))

    def test_unknown_purpose_rejected(self):
        with pytest.raises(KeyError):
            substream(0, 0, "nonsense")

    def test_consumption_isolation(self):
        """Draining one stream must not perturb a sibling stream."""
        substream(1, 0, ARM_DRAW, 0).normal(size=1000)
        fresh = substream(1, 0, ARM_DRAW, 1).normal(size=3)
        assert np.array_equal(fresh, substream(1, 0, ARM_DRAW, 1).normal(size=3))


class TestArmModel:
    def test_gaussian_draw_moments(self):
        arm = ArmModel(GAUSSIAN, 2.0, 0.5)
        x = arm.draw(np.random.default_rng(0), 200_000)
        assert abs(x.mean() - 2.0) < 0.01
        assert abs(x.std() - 0.5) < 0.01

    def test_bernoulli_draw_values(self):
        arm = ArmModel(BERNOULLI, 0.3)
        x = arm.draw(np.random.default_rng(1), 10_000)
        assert set(np.unique(x)) <= {0.0, 1.0}
        assert abs(x.mean() - 0.3) < 0.02

    def test_point_mass_arms(self):
        assert ArmModel(BERNOULLI, 1.0).draw(np.random.default_rng(2), 50).min() == 1.0
        assert ArmModel(BERNOULLI, 0.0).draw(np.random.default_rng(2), 50).max() == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            ArmModel("poisson", 1.0)
        with pytest.raises(ValueError):
            ArmModel(BERNOULLI, 1.5)
        with pytest.raises(ValueError):
            ArmModel(GAUSSIAN, 0.0, obs_std=0.0)

    def test_scalar_draw(self):
        v = draw_sample(ArmModel(GAUSSIAN, 0.0), np.random.default_rng(3))
        assert isinstance(v, float)


def _small_trace(split=False):
    arms = [ArmModel(GAUSSIAN, 1.0), ArmModel(GAUSSIAN, 0.0)]
    policy = PolicyConfig("greedy", gumbel_tau=1.0)
    return run_trial(arms, policy, 10, master_seed=5, trial_index=2, split=split)


class TestTrace:
    def test_validate_passes_on_real_trace(self):
        _small_trace().validate()
        _small_trace(split=True).validate()

    def test_counts_and_values_round_trip(self):
        tr = _small_trace()
        x = tr.values_in_draw_order()
        assert x.shape == (10,)
        # regrouping by arm recovers samples_by_arm exactly
        for k in range(tr.K):
            assert np.array_equal(x[tr.selections == k], tr.samples_by_arm[k])

    def test_sample_mean_matches_manual(self):
        tr = _small_trace()
        for t in (2, 5, 10):
            for k in range(tr.K):
                n = tr.counts(t)[k]
                if n == 0:
                    with pytest.raises(UndefinedMean):
                        sample_mean(tr, k, t)
                else:
                    manual = tr.samples_by_arm[k][:n].mean()
                    assert sample_mean(tr, k, t) == pytest.approx(manual, abs=0)

    def test_sample_mean_undefined_before_first_pull(self):
        tr = _small_trace()
        with pytest.raises(UndefinedMean):
            sample_mean(tr, 1, 1)  # round-robin reaches arm 1 only at round 2

    def test_json_round_trip(self):
        tr = _small_trace(split=True)
        back = Trace.from_json(tr.to_json())
        assert np.array_equal(back.selections, tr.selections)
        assert np.allclose(back.decision_stats, tr.decision_stats)
        assert np.allclose(back.gumbel_draws, tr.gumbel_draws)
        for k in range(tr.K):
            assert np.allclose(back.samples_by_arm[k], tr.samples_by_arm[k])
            assert np.allclose(back.held_out_by_arm[k], tr.held_out_by_arm[k])
        assert back.policy == tr.policy
        assert back.master_seed == tr.master_seed and back.trial_index == tr.trial_index

    def test_schema_version_checked(self):
        d = _small_trace().to_dict()
        d["schema"] = 999
        with pytest.raises(TraceSchemaError):
            Trace.from_dict(d)

    def test_validate_rejects_corruption(self):
        tr = _small_trace()
        tr.selections = tr.selections.copy()
        tr.selections[0] = 1  # breaks the round-robin prefix
        with pytest.raises(ValueError):
            tr.validate()
