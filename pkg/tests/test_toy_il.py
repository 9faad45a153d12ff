import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maillab.toy_il import (DatasetFormatError, DelayedCueEnv, DemoDataset, DimensionError,
                            MultimodalReachEnv, OcclusionConfig, RandomPolicy, ScriptedExpertPolicy,
                            Trajectory, apply_occlusion, gen_copy_task, gen_delayed_cue,
                            gen_multimodal_reach, gen_two_delta, generate_dataset, make_env,
                            make_windows, replay, rollout_evaluate, subsample_dataset, task_dims)


@pytest.fixture(scope="module")
def reach():
    return gen_multimodal_reach(100, 3)


@pytest.fixture(scope="module")
def cue():
    return gen_delayed_cue(60, 3, 4)


class ConstantPolicy:
    """Ignores its input and always proposes the same action."""

    def __init__(self, obs_dim, action, K=1, J=1):
        self.obs_dim, self.act_dim, self.K, self.J = obs_dim, 2, K, J
        self.action = np.asarray(action, dtype=np.float64)

    def predict(self, s_hist, rng=None, cond=None):
        return np.tile(self.action, (len(s_hist), self.J, 1))


class TestDatasets:
    def test_byte_identical(self, reach):
        assert gen_multimodal_reach(100, 3).to_bytes() == reach.to_bytes()

    def test_seed_changes_content(self, reach):
        assert gen_multimodal_reach(100, 4).to_bytes() != reach.to_bytes()

    def test_mode_balance(self, reach):
        share = np.mean([tr.label for tr in reach.trajectories])
        assert 0.4 <= share <= 0.6

    def test_starts_on_axis(self, reach):
        assert all(tr.observations[0, 0] == 0.0 for tr in reach.trajectories)

    def test_both_goals_reached(self, reach):
        ends = np.array([tr.observations[-1, 0] + tr.actions[-1, 0] for tr in reach.trajectories])
        assert (ends > 0.5).any() and (ends < -0.5).any()

    @pytest.mark.parametrize("which", ["reach", "cue"])
    def test_replay_matches(self, which, request):
        ds = request.getfixturevalue(which)
        env = make_env(ds.task)
        for tr in ds.trajectories:
            assert tr.success
            obs, ok = replay(env, tr)
            np.testing.assert_allclose(obs, tr.observations, rtol=0, atol=1e-9)
            assert ok

    def test_serialization_round_trip(self, cue, tmp_path):
        cue.save(tmp_path / "cue.mailds")
        back = DemoDataset.load(tmp_path / "cue.mailds")
        assert back.to_bytes() == cue.to_bytes()
        assert (back.task, back.seed, len(back)) == (cue.task, cue.seed, len(cue))

    def test_conditioning_round_trip(self, rng):
        trs = [Trajectory(rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), rng.normal(size=4))
               for _ in range(2)]
        ds = DemoDataset("custom", 9, 2, 1, trs, cond_dim=4)
        back = DemoDataset.from_bytes(ds.to_bytes())
        np.testing.assert_array_equal(back.trajectories[1].conditioning, trs[1].conditioning)

    def test_magic_checked(self):
        with pytest.raises(DatasetFormatError):
            DemoDataset.from_bytes(b"NOTDATA" + bytes(40))

    def test_truncation_detected(self, cue):
        with pytest.raises(DatasetFormatError):
            DemoDataset.from_bytes(cue.to_bytes()[:-5])

    def test_mismatched_steps_rejected(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_reach_needs_two(self):
        with pytest.raises(ValueError):
            gen_multimodal_reach(1, 0)

    def test_two_delta(self):
        ds = gen_two_delta(500, 0)
        acts = np.array([tr.actions[0, 0] for tr in ds.trajectories])
        assert set(np.unique(acts)) == {-1.0, 1.0}
        assert 0.4 <= np.mean(acts > 0) <= 0.6

    def test_copy_task(self):
        for tr in gen_copy_task(20, 1).trajectories:
            np.testing.assert_array_equal(tr.observations, tr.actions)

    @pytest.mark.parametrize("task,dims", [("multimodal-reach", (6, 2)), ("delayed-cue-k4", (3, 2)),
                                           ("two-delta", (1, 1)), ("copy", (2, 2))])
    def test_dims(self, task, dims):
        ds = generate_dataset(task, 3, 0)
        assert task_dims(task) == dims == (ds.obs_dim, ds.act_dim)
        assert ds.task == task

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            generate_dataset("maze", 3, 0)


class TestDelayedCue:
    def test_cue_construction(self, cue):
        for tr in cue.trajectories:
            sign = 1.0 if tr.label == 1 else -1.0
            assert tr.observations[0, 2] == sign
            np.testing.assert_array_equal(tr.observations[:3, 2], sign)
            assert not tr.observations[3:, 2].any()

    def test_locked_until_cue_vanishes(self, cue):
        for tr in cue.trajectories:
            assert not tr.actions[:3].any()
            np.testing.assert_array_equal(tr.observations[:4, :2], tr.observations[:1, :2].repeat(4, 0))

    def test_min_delay(self):
        with pytest.raises(ValueError):
            DelayedCueEnv(1)

    def test_windows_hold_cue_only_with_history(self, cue):
        S5, _, _ = make_windows(cue, 5, 4)
        S1, _, _ = make_windows(cue, 1, 4)
        first_free = np.cumsum([0] + [tr.steps for tr in cue.trajectories])[:-1] + 3
        assert np.all(np.abs(S5[first_free, :, 2]).max(axis=1) == 1)
        assert not S1[first_free, :, 2].any()

    @pytest.mark.parametrize("side", [-1.0, 1.0])
    def test_single_step_policy_bounded(self, side):
        pol = ConstantPolicy(3, [side * 0.1, 0.1])
        rate = rollout_evaluate(pol, DelayedCueEnv(3), 400, 2).success_rate
        assert rate <= 0.6

    def test_memoryless_expert_bounded(self):
        rate = rollout_evaluate(ScriptedExpertPolicy(DelayedCueEnv(3), K=1), DelayedCueEnv(3),
                                400, 2).success_rate
        assert rate <= 0.6

    def test_expert_with_history(self):
        env = DelayedCueEnv(3)
        assert rollout_evaluate(ScriptedExpertPolicy(env, K=5), env, 200, 2).success_rate == 1.0


class TestWindows:
    def test_shapes_and_padding(self):
        tr = Trajectory(np.arange(6.0).reshape(3, 2) + 1, np.arange(3.0).reshape(3, 1) + 1)
        ds = DemoDataset("custom", 0, 2, 1, [tr])
        S, A, cond = make_windows(ds, 2, 2)
        assert S.shape == (3, 2, 2) and A.shape == (3, 2, 1) and cond is None
        np.testing.assert_array_equal(S[0], [[0, 0], [1, 2]])
        np.testing.assert_array_equal(S[2], [[3, 4], [5, 6]])
        np.testing.assert_array_equal(A[2, :, 0], [3, 0])


class TestSubsample:
    def test_identity(self, reach):
        sub = subsample_dataset(reach, 1.0, 5)
        assert [id(t) for t in sub.trajectories] == [id(t) for t in reach.trajectories]

    def test_fifth(self, reach):
        assert len(subsample_dataset(reach, 0.2, 5)) == 20

    def test_seeds_differ(self, reach):
        a = [id(t) for t in subsample_dataset(reach, 0.2, 1).trajectories]
        b = [id(t) for t in subsample_dataset(reach, 0.2, 2).trajectories]
        assert a != b

    def test_order_preserved(self, reach):
        pos = {id(t): i for i, t in enumerate(reach.trajectories)}
        idx = [pos[id(t)] for t in subsample_dataset(reach, 0.37, 8).trajectories]
        assert idx == sorted(idx) and len(set(idx)) == len(idx) == 37

    @pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
    def test_bad_fraction(self, reach, fraction):
        with pytest.raises(ValueError):
            subsample_dataset(reach, fraction, 0)

    @settings(max_examples=30, deadline=None)
    @given(fraction=st.floats(0.01, 1.0), seed=st.integers(0, 1000))
    def test_size_is_ceiling(self, fraction, seed):
        ds = gen_two_delta(40, 0)
        assert len(subsample_dataset(ds, fraction, seed)) == int(np.ceil(round(fraction * 40, 9)))


class TestOcclusion:
    def test_zero_rate_identity(self, rng):
        x = rng.normal(size=(50, 3))
        np.testing.assert_array_equal(apply_occlusion(x, OcclusionConfig(0.0), rng), x)

    def test_full_rate_zeros(self, rng):
        assert not apply_occlusion(rng.normal(size=(50, 3)), OcclusionConfig(1.0), rng).any()

    def test_rate(self, rng):
        x = np.ones(100_000)
        masked = apply_occlusion(x, OcclusionConfig(0.3), rng)
        assert abs(np.mean(masked == 0) - 0.3) <= 0.01

    def test_mean_scaling(self, rng):
        x = rng.uniform(0.5, 1.5, size=200_000)
        ratio = apply_occlusion(x, OcclusionConfig(0.4), rng).mean() / x.mean()
        assert abs(ratio - 0.6) <= 0.01

    def test_fresh_draw_per_call(self, rng):
        x, cfg = np.ones(64), OcclusionConfig(0.5)
        assert not np.array_equal(apply_occlusion(x, cfg, rng), apply_occlusion(x, cfg, rng))

    @pytest.mark.parametrize("rate", [-0.1, 1.1])
    def test_bad_rate(self, rate):
        with pytest.raises(ValueError):
            OcclusionConfig(rate)


class TestRollout:
    def test_expert_solves_reach(self):
        env = MultimodalReachEnv()
        assert rollout_evaluate(ScriptedExpertPolicy(env), env, 100, 0).success_rate == 1.0

    def test_random_policy_fails(self):
        res = rollout_evaluate(RandomPolicy(6), MultimodalReachEnv(), 200, 0)
        assert res.success_rate <= 0.1
        assert len(res.episodes) == 200

    def test_same_seed_same_outcomes(self):
        env = MultimodalReachEnv()
        first = rollout_evaluate(RandomPolicy(6, J=3), env, 50, 9, OcclusionConfig(0.3), execute=2)
        second = rollout_evaluate(RandomPolicy(6, J=3), env, 50, 9, OcclusionConfig(0.3), execute=2)
        assert first.episodes == second.episodes

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            rollout_evaluate(RandomPolicy(3), MultimodalReachEnv(), 5, 0)

    def test_episode_count(self):
        with pytest.raises(ValueError):
            rollout_evaluate(RandomPolicy(6), MultimodalReachEnv(), 0, 0)

    def test_execute_bounds(self):
        with pytest.raises(ValueError):
            rollout_evaluate(RandomPolicy(6, J=2), MultimodalReachEnv(), 5, 0, execute=3)

    def test_history_zero_padded(self):
        seen = []

        class Spy(ConstantPolicy):
            def predict(self, s_hist, rng=None, cond=None):
                seen.append(np.array(s_hist))
                return super().predict(s_hist)

        rollout_evaluate(Spy(6, [0.0, 0.0], K=3), MultimodalReachEnv(), 2, 0)
        # goal coordinates are never zero, so they mark real observations
        assert not seen[0][:, :2].any() and seen[0][:, 2, 2:].all()
        assert not seen[1][:, 0].any() and seen[1][:, 1:, 2:].all()

    def test_receding_horizon_replans(self):
        calls = []

        class Counter(ConstantPolicy):
            def predict(self, s_hist, rng=None, cond=None):
                calls.append(1)
                return super().predict(s_hist)

        rollout_evaluate(Counter(6, [0.0, 0.0], J=4), MultimodalReachEnv(), 3, 0, execute=4)
        assert len(calls) == MultimodalReachEnv.horizon // 4

    def test_make_env(self):
        assert make_env("delayed-cue-k5").k_needed == 5
        with pytest.raises(ValueError):
            make_env("two-delta")
