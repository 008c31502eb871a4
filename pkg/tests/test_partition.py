import math

import numpy as np
import pytest

from flower.partition import (CoordinatePartition, canonicalize, grow_or_shrink, hamming_ball_propose,
                              hamming_ball_size, log_first_layer_prior)

from oracles import batch_means_se, collapsed_log_post, enumerate_posterior, state_key


def test_canonicalize_first_appearance():
    lab, K = canonicalize([3, 3, 1, 7, 1])
    assert lab.tolist() == [0, 0, 1, 2, 1] and K == 3
    assert canonicalize([0])[0].tolist() == [0]


def test_hamming_ball_trivial_and_size():
    rng = np.random.default_rng(0)
    assert hamming_ball_size(1) == 1
    assert hamming_ball_propose(np.array([0]), rng).tolist() == [0]
    assert [hamming_ball_size(d) for d in (2, 3, 6)] == [3, 7, 31]


def test_hamming_ball_d2_enumeration():
    rng = np.random.default_rng(1)
    seen = {}
    for _ in range(30000):
        v = tuple(hamming_ball_propose(np.array([0, 0]), rng).tolist())
        seen[v] = seen.get(v, 0) + 1
    assert set(seen) == {(0, 0), (1, 0), (0, 1)}
    for c in seen.values():
        assert abs(c / 30000 - 1 / 3) < 4 * math.sqrt(2 / 9 / 30000)


def test_hamming_ball_uniform_frequencies():
    rng = np.random.default_rng(2)
    s = np.array([0, 1, 1, 2])
    N = 100_000
    ball = {tuple(s)}
    for pos in range(4):
        for lab in range(4):
            v = s.copy()
            v[pos] = lab
            ball.add(tuple(v))
    assert len(ball) == hamming_ball_size(4)
    counts = dict.fromkeys(ball, 0)
    for _ in range(N):
        counts[tuple(hamming_ball_propose(s, rng).tolist())] += 1
    p = 1 / len(ball)
    se = math.sqrt(p * (1 - p) / N)
    assert all(abs(c / N - p) < 4 * se for c in counts.values())


def test_grow_and_shrink_slices():
    t = np.arange(4).reshape(2, 1, 2)
    g = grow_or_shrink(t, 0, 3, fill=9)
    assert g.shape == (3, 1, 2) and g.size - t.size == 1 * 2
    assert np.array_equal(g[:2], t) and np.all(g[2] == 9)
    s = grow_or_shrink(g, 0, 2)
    assert s.shape == (2, 1, 2) and np.array_equal(s, t)


def toy_partition(levels, codes, z, K=2, K_star=2):
    return CoordinatePartition(levels, K, K_star, np.asarray(codes, dtype=np.int64), np.asarray(z, dtype=np.int64))


def test_initial_tensor_is_single_cell():
    part = toy_partition((3, 4), [[0, 1, 2], [3, 2, 1]], [0, 1, 1])
    assert part.shape == (1, 1) and part.volume == 1
    part.check_consistency(np.array([0, 1, 1]))


def test_log_target_differences_match_oracle():
    rng = np.random.default_rng(3)
    levels = (2, 3)
    codes = np.array([[0, 1, 0, 1, 1, 0, 0], [0, 2, 1, 1, 2, 0, 2]])
    z = rng.integers(0, 3, 7)
    a, alpha, phi, phi_star = np.array([0.4, 1.1, 0.5]), 2.0, 1.3, 0.8
    part = CoordinatePartition(levels, 3, 3, codes, z)
    configs = [([[0, 0], [0, 0, 0]], [[1]]),
               ([[0, 1], [0, 0, 0]], [[0], [2]]),
               ([[0, 1], [0, 1, 1]], [[0, 1], [1, 2]]),
               ([[0, 0], [0, 1, 2]], [[2, 0, 0]])]
    got, refs = [], []
    for s_list, star in configs:
        part.set_layers([np.array(v) for v in s_list], np.array(star), z)
        part.check_consistency(z)
        # log_target(h) carries covariate h's prior; the other covariate is held fixed per pair
        got.append(part.log_target(1, a, alpha, phi, phi_star)
                   + log_first_layer_prior(part.s[0], phi))
        refs.append(collapsed_log_post(codes, z, [np.array(v) for v in s_list], np.array(star),
                                       a, alpha, phi, phi_star, 3))
    got, refs = np.array(got), np.array(refs)
    assert np.allclose(got - got[0], refs - refs[0], atol=1e-10)


def test_s_star_conditional_matches_enumeration():
    codes = np.array([[0, 1, 1, 0, 1]])
    z = np.array([0, 1, 1, 0, 0])
    a, alpha, phi_star, K_star = np.array([0.7, 0.6]), 1.3, 1.0, 3
    part = CoordinatePartition((2,), 2, K_star, codes, z)
    part.set_layers([np.array([0, 1])], np.array([1, 1]), z)
    for v in range(2):
        p = part.s_star_conditional(v, a, alpha, phi_star)
        logs = []
        for g in range(K_star):
            star = part.s_star.copy().reshape(-1)
            star[v] = g
            logs.append(collapsed_log_post(codes, z, part.s, star.reshape(part.shape), a, alpha, 1.0,
                                           phi_star, K_star))
        ref = np.exp(np.array(logs) - max(logs))
        assert np.allclose(p, ref / ref.sum(), atol=1e-12)


def test_s_star_conditional_empty_cell_is_prior_occupancy():
    codes = np.array([[0, 0, 0]])  # level 1 never observed
    z = np.array([0, 1, 0])
    part = CoordinatePartition((2,), 2, 3, codes, z)
    part.set_layers([np.array([0, 1])], np.array([2, 0]), z)
    p = part.s_star_conditional(1, np.array([0.5, 0.5]), 1.0, 1.5)
    w = 1.5 / 3 + np.array([0, 0, 1])
    assert np.allclose(p, w / w.sum())


def test_single_second_layer_label():
    rng = np.random.default_rng(4)
    codes = np.array([[0, 1, 2, 2]])
    z = np.array([0, 1, 0, 1])
    part = CoordinatePartition((3,), 2, 1, codes, z)
    for _ in range(20):
        part.joint_update_s(0, z, np.array([0.5, 0.5]), 1.0, 1.0, 1.0, rng)
        part.gibbs_s_star(np.array([0.5, 0.5]), 1.0, 1.0, rng)
        assert np.all(part.s_star == 0)


def test_counts_and_volume_after_random_moves():
    rng = np.random.default_rng(5)
    levels = (4, 3, 5)
    n = 200
    codes = np.stack([rng.integers(0, d, n) for d in levels])
    z = rng.integers(0, 4, n)
    part = CoordinatePartition(levels, 4, 6, codes, z)
    a = rng.dirichlet(np.ones(4)) * 2
    for _ in range(300):
        for h in range(3):
            part.joint_update_s(h, z, a, 2.0, 5.0, 1.0, rng)
            assert part.volume == math.prod(int(s.max()) + 1 for s in part.s)
            assert part.m_star.sum() == part.volume
        part.gibbs_s_star(a, 2.0, 1.0, rng)
        part.check_consistency(z)
    assert part.accepted_s > 0


def run_toy_chain(levels, codes, z, a, alpha, phi, phi_star, K_star, sweeps, seed):
    rng = np.random.default_rng(seed)
    part = CoordinatePartition(levels, len(a), K_star, codes, z)
    keys = []
    for _ in range(sweeps):
        for h in range(len(levels)):
            part.joint_update_s(h, z, a, alpha, phi, phi_star, rng)
        part.gibbs_s_star(a, alpha, phi_star, rng)
        keys.append(state_key(part.s, part.s_star))
    return keys


@pytest.mark.parametrize("levels,codes,z", [
    ((2,), [[0, 0, 1, 1]], [0, 0, 1, 1]),
    ((3,), [[0, 0, 1, 1, 2, 2]], [0, 1, 1, 1, 0, 0]),
], ids=["d2-n4", "d3-n6"])
def test_partition_chain_matches_enumeration(levels, codes, z):
    codes, z = np.array(codes), np.array(z)
    a, alpha, phi, phi_star, K_star = np.array([0.3, 0.3]), 0.6, 1.0, 1.0, 2
    post = enumerate_posterior(levels, K_star, lambda s, t: collapsed_log_post(
        codes, z, [np.array(v) for v in s], t, a, alpha, phi, phi_star, K_star))
    keys = run_toy_chain(levels, codes, z, a, alpha, phi, phi_star, K_star, 60_000, seed=10)
    assert set(keys) <= set(post)
    for key, p in post.items():
        ind = np.array([k == key for k in keys], dtype=float)
        se = max(batch_means_se(ind), 1e-4)
        assert abs(ind.mean() - p) < 3 * se, (key, ind.mean(), p, se)
