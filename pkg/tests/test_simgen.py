import math

import numpy as np
import pytest
from scipy import stats

from flower import simgen
from flower.estimators import ari, make_grid, map_partitions, score_against_truth
from flower.simgen import TrueModel, sample_dataset, scenario1, scenario2, survey_artifact, survey_covariates

from oracles import iid_se


def _tn_cdf_oracle(x, m, sd, a=0.0, b=10.0):
    phi = lambda t: 0.5 * math.erfc(-t / math.sqrt(2))
    return (phi((x - m) / sd) - phi((a - m) / sd)) / (phi((b - m) / sd) - phi((a - m) / sd))


def one_cov_model(R, mu, sd, weights=None):
    d = len(mu)
    K = len(mu[0])
    w = [np.full((1, K), 1.0 / K) if weights is None else np.asarray(weights[l]) for l in range(d)]
    return TrueModel(R=R, mu=mu, sigma2=[np.asarray(s) ** 2 for s in sd], s=[[np.array([0, 0])]] * d,
                     s_star=[np.array([0])] * d, weights=w, levels=(2,))


def test_support_bounds_respected():
    model, data = scenario1(500, np.random.default_rng(0))
    assert data.x.min() >= 0.0 and data.x.max() <= 10.0
    assert data.x.shape == (3, 500) and data.codes.shape == (5, 500)
    edge = one_cov_model(np.eye(1), [[0.05]], [[3.0]])
    x = sample_dataset(edge, np.zeros((1, 3000), np.int64), np.random.default_rng(1)).x
    assert x.min() >= 0.0 and x.max() <= 10.0


def test_independent_coordinates_have_no_rank_correlation():
    model = one_cov_model(np.eye(2), [[3.0, 6.0], [2.0, 7.0]], [[1.0, 1.0], [0.8, 1.5]])
    x = sample_dataset(model, np.zeros((1, 4000), np.int64), np.random.default_rng(2)).x
    rho = stats.spearmanr(x[0], x[1])[0]
    assert abs(rho) < 3 / math.sqrt(4000)


def test_single_component_marginal_passes_ks():
    model = one_cov_model(np.eye(2), [[4.0], [8.5]], [[1.5], [2.0]])
    x = sample_dataset(model, np.zeros((1, 3000), np.int64), np.random.default_rng(3)).x
    for l, (m, sd) in enumerate([(4.0, 1.5), (8.5, 2.0)]):
        res = stats.kstest(x[l], lambda t: np.array([_tn_cdf_oracle(v, m, sd) for v in np.atleast_1d(t)]))
        assert res.pvalue > 0.01


def test_gaussian_rank_correlation_recovered():
    R = np.array([[1.0, 0.7], [0.7, 1.0]])
    model = one_cov_model(R, [[2.0, 6.0], [3.0, 7.0]], [[1.0, 1.2], [0.7, 1.0]])
    x = sample_dataset(model, np.zeros((1, 5000), np.int64), np.random.default_rng(4)).x
    # invert each marginal with its own CDF, then correlate the normal scores
    y = []
    for l in range(2):
        m, sd = model.mu[l], np.sqrt(model.sigma2[l])
        F = np.array([0.5 * _tn_cdf_oracle(v, m[0], sd[0]) + 0.5 * _tn_cdf_oracle(v, m[1], sd[1]) for v in x[l]])
        y.append(stats.norm.ppf(np.clip(F, 1e-12, 1 - 1e-12)))
    prod = y[0] * y[1]
    assert abs(prod.mean() - 0.7) < 3 * iid_se(prod)


def test_scenario1_examples():
    model, data = scenario1(1000, np.random.default_rng(5))
    assert model.s[0][0].tolist() == [0, 0, 0, 1, 1, 1]
    for l in range(3):
        assert model.s[l][4].tolist() == [0, 0, 0]
    assert model.mu[0].tolist() == [1, 2, 3, 5]
    assert np.allclose(model.sigma2[0], 0.75 ** 2)
    assert model.levels == (6, 2, 4, 5, 3) and model.support == (0.0, 10.0)
    assert np.allclose(model.R, [[1, 0.7, 0.49], [0.7, 1, 0.7], [0.49, 0.7, 1]])
    for l in range(3):
        assert np.allclose(model.weights[l].sum(axis=1), 1.0)
    # uniform covariates
    for h, d_h in enumerate(model.levels):
        counts = np.bincount(data.codes[h], minlength=d_h)
        expect = 1000 / d_h
        assert stats.chisquare(counts, [expect] * d_h).pvalue > 0.001


def test_scenario1_rejects_nonpositive_n():
    with pytest.raises(ValueError):
        scenario1(0, np.random.default_rng(0))


def test_scenario2_uses_fixed_correlation():
    art = survey_artifact()
    assert art.R[0, 1] == 0.18 and art.R[1, 0] == 0.18
    assert simgen.SCENARIO2_R[1, 4] == 0.36 and simgen.SCENARIO2_R[2, 5] == -0.21
    assert simgen.SCENARIO2_N == 6307
    codes = survey_covariates(300, np.random.default_rng(6))
    data = scenario2(art, codes, np.random.default_rng(7))
    assert data.x.shape == (4, 300) and data.levels == (2, 7, 6, 6)
    with pytest.raises(FileNotFoundError):
        scenario2(None, codes, np.random.default_rng(7))
    with pytest.raises(ValueError):
        scenario2(art, codes[:2], np.random.default_rng(7))


def test_scenario2_forced_identity_is_independent():
    art = survey_artifact()
    codes = np.zeros((4, 4000), np.int64)
    x = scenario2(art, codes, np.random.default_rng(8), R=np.eye(4)).x
    rho = stats.spearmanr(x[1], x[3])[0]
    assert abs(rho) < 3 / math.sqrt(4000)
    x = scenario2(art, codes, np.random.default_rng(8)).x
    assert stats.spearmanr(x[1], x[3])[0] > 0.05  # R_24 = 0.10 in the fixed block


def test_truth_against_itself_scores_perfectly():
    model, _ = scenario1(50, np.random.default_rng(9))
    pd = model.as_draws()
    sc = score_against_truth(model, pd)
    assert sc["ise_mean"] == 0.0 and sc["ari_mean"] == 1.0
    est = map_partitions(pd)
    for l in range(3):
        assert ari(est.combination_partition(l), model.combination_partition(l)) == 1.0


def test_empirical_cdfs_converge_in_large_cells():
    model, data = scenario1(3000, np.random.default_rng(10))
    combo = np.ravel_multi_index(tuple(data.codes), model.levels)
    groups = [model.groups(l)[combo] for l in range(3)]
    checked = 0
    for l in range(3):
        for g in np.unique(groups[l]):
            idx = np.flatnonzero(groups[l] == g)
            if len(idx) < 200:
                continue
            xs = np.sort(data.x[l, idx])
            F = model.cond_cdf(l, xs, np.full(len(xs), g))
            # oracle CDF built independently from the truncated-normal formula
            F_or = np.array([sum(w * _tn_cdf_oracle(v, m, math.sqrt(s2)) for w, m, s2 in
                                 zip(model.weights[l][g], model.mu[l], model.sigma2[l])) for v in xs])
            assert np.allclose(F, F_or, atol=1e-10)
            m = len(xs)
            D = max(np.max(np.arange(1, m + 1) / m - F_or), np.max(F_or - np.arange(m) / m))
            assert D < 1.63 / math.sqrt(m)  # 1% level to keep the family-wise rate low
            checked += 1
    assert checked >= 3


def test_quantile_inverts_cdf():
    model, _ = scenario1(10, np.random.default_rng(11))
    u = np.linspace(0.001, 0.999, 50)
    rows = np.zeros(50, np.int64)
    q = model.cond_quantile(0, u, rows)
    assert np.allclose(model.cond_cdf(0, q, rows), u, atol=1e-8)


def test_json_roundtrip(tmp_path):
    model, _ = scenario1(10, np.random.default_rng(12))
    path = tmp_path / "truth.json"
    model.save(path)
    back = TrueModel.from_json(path)
    assert np.array_equal(back.R, model.R) and back.levels == model.levels
    for l in range(3):
        assert np.array_equal(back.weights[l], model.weights[l])
        assert np.array_equal(back.s_star[l], model.s_star[l])
    g = make_grid((0, 10), 300)
    for l in range(3):
        assert np.array_equal(back.cond_density_all(l, g), model.cond_density_all(l, g))
    with pytest.raises(ValueError):
        TrueModel.from_json({"schema": "other"})


def test_invalid_models_rejected():
    with pytest.raises(ValueError):
        one_cov_model(np.array([[1.0, 2.0], [2.0, 1.0]]), [[1.0], [2.0]], [[1.0], [1.0]])
    with pytest.raises(ValueError):
        one_cov_model(np.eye(1), [[1.0, 2.0]], [[1.0, 1.0]], weights=[[[0.7, 0.7]]])


def test_survey_artifact_structure():
    art = survey_artifact()
    assert art.levels == (2, 7, 6, 6) and art.d == 4
    g = make_grid((0, 10), 300)
    for l in range(4):
        dens = art.cond_density_all(l, g)
        assert dens.shape == (2 * 7 * 6 * 6, 300)
        assert np.all(np.abs(dens.sum(axis=1) * (g[1] - g[0]) - 1) < 0.02)
        # distinct rows correspond to distinct groups
        assert len(np.unique(dens.round(12), axis=0)) == art.combination_partition(l).max() + 1
    codes = survey_covariates(20000, np.random.default_rng(13))
    for h, share in enumerate(simgen.SURVEY_SHARES):
        freq = np.bincount(codes[h], minlength=len(share)) / 20000
        assert np.allclose(freq, share, atol=0.015)
