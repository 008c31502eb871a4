import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from flower import copula
from flower.copula import (CopulaParams, b_grid, build_V, cholesky_factor, copula_log_density,
                           gaussian_loglik, latent_y, marginal_latent_y, n_theta, nearest_params,
                           theta_grid, update_b, update_theta)
from flower.dist import CLAMP_EPS, tn_cdf

from oracles import batch_means_se


def random_params(rng, d, M=101):
    return CopulaParams(d, M, M, rng.integers(0, M, d - 1), rng.integers(0, M, n_theta(d)))


def test_grids_match_formula():
    M = 7
    for m in range(1, M + 1):
        assert b_grid(M)[m - 1] == pytest.approx(-0.99 + 2 * 0.99 * (m - 1) / (M - 1), abs=1e-15)
        assert theta_grid(M)[m - 1] == pytest.approx(-3.14 + 2 * 3.14 * (m - 1) / (M - 1), abs=1e-15)
    assert n_theta(2) == 0 and n_theta(3) == 1 and n_theta(4) == 3 and n_theta(6) == 10


def test_d2_examples():
    assert np.allclose(build_V(b=[0.0], theta=[]).R, np.eye(2), atol=0)
    assert build_V(b=[0.7], theta=[]).R[1, 0] == pytest.approx(0.7, abs=1e-15)


def test_d3_example_against_hand_product():
    R = build_V(b=[0.5, 0.3], theta=[0.4]).R
    assert R[2, 0] == pytest.approx(0.3 * math.sin(0.4), abs=1e-14)
    assert R[2, 1] == pytest.approx(0.5 * 0.3 * math.sin(0.4) + math.sqrt(0.75) * 0.3 * math.cos(0.4), abs=1e-14)
    assert R[1, 0] == pytest.approx(0.5, abs=1e-15)


def test_random_matrices_are_valid_correlations():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        d = int(rng.integers(2, 7))
        p = random_params(rng, d)
        cm = build_V(p)
        assert np.allclose(np.diag(cm.R), 1.0, atol=1e-12)
        assert np.allclose((cm.chol_V ** 2).sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(np.triu(cm.chol_V, 1), 0.0)
        assert np.linalg.eigvalsh(cm.R).min() > 0
        assert abs(np.linalg.det(cm.R) - np.prod(1 - p.b ** 2)) < 1e-8
        assert abs(math.exp(cm.logdet) - np.linalg.det(cm.R)) < 1e-8
        assert np.allclose(cm.precision @ cm.R, np.eye(d), atol=1e-6)


def test_log_density_examples():
    cm = build_V(b=[0.0, 0.0], theta=[0.0])
    assert copula_log_density(np.array([0.3, -1.0, 2.0]), cm) == pytest.approx(0.0, abs=1e-14)
    rho = 0.6
    cm = build_V(b=[rho], theta=[])
    assert copula_log_density(np.zeros(2), cm) == pytest.approx(-0.5 * math.log(1 - rho * rho), abs=1e-14)
    with pytest.raises(ValueError):
        copula_log_density(np.zeros(3), cm)


def test_log_density_is_mvn_ratio():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = int(rng.integers(2, 6))
        cm = build_V(random_params(rng, d, 21))
        y = rng.normal(size=(d, 5))
        want = (multivariate_normal(np.zeros(d), cm.R).logpdf(y.T)
                - multivariate_normal(np.zeros(d), np.eye(d)).logpdf(y.T))
        assert np.allclose(copula_log_density(y, cm), want, atol=1e-9)


def test_bivariate_ratio_matches_closed_form():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(2, 30))

    def biv(r):
        q = (y[0] ** 2 - 2 * r * y[0] * y[1] + y[1] ** 2) / (1 - r * r)
        return -0.5 * y.shape[1] * math.log(1 - r * r) - 0.5 * q.sum()

    g = b_grid(101)
    for m in (10, 50, 90):
        got = gaussian_loglik(y, [g[m + 1]], []) - gaussian_loglik(y, [g[m]], [])
        assert got == pytest.approx(biv(g[m + 1]) - biv(g[m]), abs=1e-9)


class _FixedRng:
    """Stands in for a Generator: always picks the current grid point."""

    def __init__(self, pick):
        self.pick = pick
        self.uniforms = 0

    def integers(self, n):
        return self.pick

    def uniform(self):
        self.uniforms += 1
        return 0.999999


def test_proposing_current_value_is_accepted():
    y = np.random.default_rng(3).normal(size=(2, 10))
    cp = CopulaParams(2, 11, 11, [5], [])
    rng = _FixedRng(1)  # middle of the three neighbours is the current point
    update_b(cp, y, rng)
    assert cp.accepted_b == 1 and cp.b_idx[0] == 5 and rng.uniforms == 1


def test_no_data_theta_always_accepted():
    # away from the grid edges the target ratio is 1 and there is no proposal correction
    rng = np.random.default_rng(4)
    cp = CopulaParams(4, 101, 101)
    y = np.zeros((4, 0))
    for _ in range(200):
        update_theta(cp, y, rng)
        assert np.all((cp.theta_idx > 0) & (cp.theta_idx < 100))
    assert cp.accepted_theta == cp.proposed_theta == 200 * 3


def test_edge_proposal_correction():
    # with no data, leaving an edge point is accepted with probability 2/3
    rng = np.random.default_rng(14)
    hits = trials = 0
    y = np.zeros((3, 0))
    for _ in range(6000):
        cp = CopulaParams(3, 5, 5, [2, 2], [0])
        update_theta(cp, y, rng)
        if cp.theta_idx[0] == 1 or cp.accepted_theta == 0:
            trials += 1
            hits += cp.theta_idx[0] == 1
    p = hits / trials
    assert abs(p - 2 / 3) < 3 * math.sqrt(2 / 9 / trials)


def test_moves_stay_on_grid():
    rng = np.random.default_rng(5)
    cp = CopulaParams(3, 9, 9)
    y = rng.normal(size=(3, 20))
    for _ in range(300):
        update_b(cp, y, rng)
        update_theta(cp, y, rng)
        assert np.all((cp.b_idx >= 0) & (cp.b_idx < 9)) and np.all((cp.theta_idx >= 0) & (cp.theta_idx < 9))
        assert np.all(np.isin(cp.b, b_grid(9))) and np.all(np.isin(cp.theta, theta_grid(9)))


def test_b_chain_detailed_balance_on_three_point_grid():
    y = np.array([[0.1], [0.05]])
    g = b_grid(3)

    def p_b(b):
        q = (y[0, 0] ** 2 - 2 * b * y[0, 0] * y[1, 0] + y[1, 0] ** 2) / (1 - b * b)
        return (1 - b * b) ** -0.5 * math.exp(-0.5 * q)

    target = np.array([p_b(b) for b in g])
    target /= target.sum()
    rng = np.random.default_rng(6)
    cp = CopulaParams(2, 3, 3, [1], [])
    steps = 100_000
    trace = np.empty(steps, dtype=np.int64)
    for t in range(steps):
        update_b(cp, y, rng)
        trace[t] = cp.b_idx[0]
    for m in range(3):
        ind = trace == m
        se = batch_means_se(ind)
        assert abs(ind.mean() - target[m]) < 3 * se, (m, ind.mean(), target[m], se)


def test_latent_y_examples():
    mu, s2 = np.array([5.0, 2.0]), np.array([1.0, 0.5])
    x = np.array([[5.0, 0.0]])
    z = np.array([[0, 1]])
    y = latent_y(x, z, mu, s2, 0.0, 10.0)
    assert y[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(y[0, 1]) and y[0, 1] == pytest.approx(copula.clamped_probit(CLAMP_EPS), abs=1e-12)
    assert y[0, 1] < -7


def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2))


def test_latent_y_random_matches_composed_oracle():
    rng = np.random.default_rng(7)
    mu, s2 = rng.uniform(1, 9, 4), rng.uniform(0.2, 2, 4)
    x = rng.uniform(0, 10, (2, 30))
    z = rng.integers(0, 4, (2, 30))
    y = latent_y(x, z, mu, s2, 0.0, 10.0)
    for l in range(2):
        for i in range(30):
            m, sd = mu[z[l, i]], math.sqrt(s2[z[l, i]])
            F = (_phi((x[l, i] - m) / sd) - _phi(-m / sd)) / (_phi((10 - m) / sd) - _phi(-m / sd))
            F = min(max(F, CLAMP_EPS), 1 - CLAMP_EPS)
            assert _phi(y[l, i]) == pytest.approx(F, rel=1e-9, abs=1e-14)


def test_marginal_scores_match_weighted_cdf():
    rng = np.random.default_rng(8)
    mu, s2 = rng.uniform(1, 9, 5), rng.uniform(0.2, 2, 5)
    x = rng.uniform(0, 10, (3, 40))
    w = rng.dirichlet(np.ones(5), size=(3, 40))
    y = marginal_latent_y(x, w, mu, s2, 0.0, 10.0)
    F = np.einsum("lik,lik->li", tn_cdf(x[..., None], mean=mu, variance=s2, lower=0.0, upper=10.0), w)
    assert np.allclose(y, copula.clamped_probit(F), atol=1e-9)
    # with all weight on the allocated kernel the two score forms coincide
    z = rng.integers(0, 5, (3, 40))
    onehot = np.eye(5)[z]
    assert np.allclose(marginal_latent_y(x, onehot, mu, s2, 0, 10), latent_y(x, z, mu, s2, 0, 10), atol=1e-9)


def test_nearest_params_inverts_grid_points():
    rng = np.random.default_rng(9)
    for d in (2, 3):
        for _ in range(20):
            p = random_params(rng, d, 51)
            p.b_idx = np.abs(p.b_idx - 25) + 25  # nonnegative b, the branch the inverse returns
            q = nearest_params(build_V(p).R, 51, 51)
            assert np.allclose(build_V(q).R, build_V(p).R, atol=1e-10)
    # higher d: the inverse may land on an equivalent angle branch, which the
    # +-3.14 grid only approximates
    for d in (4, 5):
        for _ in range(20):
            p = random_params(rng, d, 51)
            p.b_idx = np.abs(p.b_idx - 25) + 25
            q = nearest_params(build_V(p).R, 51, 51)
            assert np.abs(build_V(q).R - build_V(p).R).max() < 5e-3


def test_cholesky_rejects_bad_theta_length():
    with pytest.raises(ValueError):
        cholesky_factor([0.1, 0.2], [0.1, 0.2])
    with pytest.raises(ValueError):
        CopulaParams(3, 2, 5)
