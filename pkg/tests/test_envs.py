"""Tests for the toy environments and dataset plumbing."""

import numpy as np
import pytest

from seemlab import envs
from seemlab.envs import BairdInstance, ToyNav


class TestToyNav:
    def test_dataset_shape_and_rewards(self):
        d = envs.toy_nav_dataset(100, seed=0)
        assert d.m == 100
        assert np.all(d.rewards == 0.0)
        assert np.all(np.abs(d.states) <= 1.0)
        assert np.all(d.actions >= 0) and np.all(d.actions < 8)

    def test_true_q_is_zero(self):
        # zero rewards everywhere means the optimal Q-value is identically zero
        d = envs.toy_nav_dataset(50, seed=1)
        assert np.all(d.rewards == 0.0)

    def test_action_zero_dynamics(self):
        env = ToyNav()
        s_next = env.dynamics(np.array([0.0, 0.0]), 0)
        assert np.allclose(s_next, [0.01, 0.0])

    def test_eight_distinct_compass_actions(self):
        dirs = {tuple(v) for v in ToyNav.directions}
        assert len(dirs) == 8
        assert (0.0, 0.0) not in dirs
        assert all(abs(c) in (0.0, 1.0) for v in dirs for c in v)

    def test_one_step_stays_in_box(self):
        d = envs.toy_nav_dataset(200, seed=2)
        assert np.max(np.abs(d.next_states)) <= 1.01 + 1e-12

    def test_next_state_matches_dynamics(self):
        d = envs.toy_nav_dataset(50, seed=3)
        env = d.env
        for t in d.transitions[:10]:
            assert np.allclose(t.s_next, env.dynamics(t.s, t.a))

    def test_encoding_is_state_plus_direction(self):
        env = ToyNav()
        x = env.encode_batch(np.array([[0.5, -0.25]]), np.array([1]))
        assert np.allclose(x, [[0.5, -0.25, 1.0, 1.0]])
        assert env.input_dim == 4

    def test_deterministic_given_seed(self):
        a = envs.toy_nav_dataset(40, seed=7)
        b = envs.toy_nav_dataset(40, seed=7)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.actions, b.actions)


class TestSubsample:
    def test_full_fraction_keeps_content(self):
        d = envs.toy_nav_dataset(30, seed=0)
        s = envs.subsample(d, 1.0, seed=5)
        assert s.m == 30
        orig = {tuple(t.s) + (t.a,) for t in d.transitions}
        kept = {tuple(t.s) + (t.a,) for t in s.transitions}
        assert orig == kept

    def test_half_is_subset(self):
        d = envs.toy_nav_dataset(100, seed=0)
        s = envs.subsample(d, 0.5, seed=9)
        assert s.m == 50
        orig = {tuple(t.s) + (t.a,) for t in d.transitions}
        for t in s.transitions:
            assert tuple(t.s) + (t.a,) in orig

    def test_same_seed_same_subset(self):
        d = envs.toy_nav_dataset(100, seed=0)
        a = envs.subsample(d, 0.3, seed=11)
        b = envs.subsample(d, 0.3, seed=11)
        assert np.array_equal(a.states, b.states)

    def test_ceil_and_bounds(self):
        d = envs.toy_nav_dataset(10, seed=0)
        assert envs.subsample(d, 0.25, seed=0).m == 3  # ceil(2.5)
        with pytest.raises(ValueError):
            envs.subsample(d, 0.0, seed=0)
        with pytest.raises(ValueError):
            envs.subsample(d, 1.5, seed=0)


class TestBaird:
    def test_feature_rank_deficiency(self):
        inst = BairdInstance()
        f = inst.feature_matrix()
        assert f.shape == (7, 8)
        assert np.linalg.matrix_rank(f) == 7

    def test_feature_pattern(self):
        inst = BairdInstance()
        assert np.array_equal(inst.state_features(2), [0, 0, 2, 0, 0, 0, 0, 1])
        assert np.array_equal(inst.state_features(6), [0, 0, 0, 0, 0, 0, 1, 2])

    def test_target_policy_always_reaches_hub(self):
        inst = BairdInstance()
        rng = np.random.default_rng(0)
        for s in range(7):
            t = envs.baird_step(inst, s, "target", rng)
            assert t.a == envs.SOLID
            assert t.s_next[0] == 6
            assert t.r == 0.0

    def test_dashed_scatters_over_outer_states(self):
        inst = BairdInstance()
        rng = np.random.default_rng(1)
        seen = set()
        for _ in range(200):
            t = envs.baird_step(inst, 3, "behavior", rng)
            if t.a == envs.DASHED:
                assert 0 <= t.s_next[0] <= 5
                seen.add(int(t.s_next[0]))
        assert seen == {0, 1, 2, 3, 4, 5}

    def test_behavior_policy_frequency(self):
        inst = BairdInstance()
        rng = np.random.default_rng(2)
        n = 10_000
        dashed = sum(
            envs.baird_step(inst, int(rng.integers(0, 7)), "behavior", rng).a
            == envs.DASHED
            for _ in range(n)
        )
        assert abs(dashed / n - 6.0 / 7.0) < 0.02

    def test_block_encoding(self):
        inst = BairdInstance()
        x = inst.encode_batch(np.array([2.0]), np.array([envs.SOLID]))
        assert np.all(x[0, :8] == 0.0)
        assert np.array_equal(x[0, 8:], inst.state_features(2))

    def test_psi_encoding_normalizes(self):
        inst = BairdInstance(use_psi=True)
        x = inst.encode_batch(np.array([0.0, 6.0]), np.array([0, 1]))
        assert np.allclose(np.linalg.norm(x, axis=1), 4.0, atol=1e-6)

    def test_classic_init(self):
        w = BairdInstance().classic_init_weights()
        assert w.shape == (16,)
        assert w[7] == 10.0 and w[15] == 10.0 and w[0] == 1.0

    def test_invalid_state_rejected(self):
        with pytest.raises(ValueError):
            envs.baird_step(BairdInstance(), 9, "target", 0)


class TestDatasetIO:
    def test_roundtrip_toy(self, tmp_path):
        d = envs.toy_nav_dataset(25, seed=4)
        path = tmp_path / "toy.jsonl"
        envs.save_dataset(path, d)
        loaded = envs.load_dataset(path)
        assert loaded.m == d.m
        assert np.array_equal(loaded.states, d.states)
        assert np.array_equal(loaded.actions, d.actions)
        assert np.array_equal(loaded.next_states, d.next_states)
        assert type(loaded.env) is ToyNav

    def test_roundtrip_baird_psi(self, tmp_path):
        d = envs.baird_dataset(15, seed=4, use_psi=True)
        path = tmp_path / "baird.jsonl"
        envs.save_dataset(path, d)
        loaded = envs.load_dataset(path)
        assert isinstance(loaded.env, BairdInstance)
        assert loaded.env.use_psi
        assert np.array_equal(loaded.inputs(), d.inputs())

    def test_serialization_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        envs.save_dataset(p1, envs.toy_nav_dataset(20, seed=6))
        envs.save_dataset(p2, envs.toy_nav_dataset(20, seed=6))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text('{"format": "nope"}\n')
        with pytest.raises(ValueError):
            envs.load_dataset(path)


class TestNextCandidates:
    def test_layout(self):
        d = envs.toy_nav_dataset(5, seed=0)
        cand = d.next_candidates()
        assert cand.shape == (40, 4)
        # row i*8+a encodes (s'_i, a)
        assert np.allclose(cand[2 * 8 + 3, :2], d.next_states[2])
        assert np.allclose(cand[2 * 8 + 3, 2:], ToyNav.directions[3])
