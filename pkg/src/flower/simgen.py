"""Synthetic data from Gaussian-copula truncated-normal mixture models."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .dist import tn_cdf
from .mixture import component_logpdf
from .partition import canonicalize
from .sampler import Dataset, Draw, PosteriorDraws, combination_groups

SCENARIO1_LEVELS = (6, 2, 4, 5, 3)
SCENARIO1_MU = np.array([[1, 2, 3, 5], [1, 2, 4, 5], [2, 3, 4, 5]], dtype=float)
SCENARIO1_SIGMA = 0.75
SCENARIO1_PARTITIONS = [  # one matrix per covariate, one row per coordinate (1-based labels)
    [[1, 1, 1, 2, 2, 2], [1, 1, 1, 1, 1, 1], [1, 1, 1, 1, 1, 1]],
    [[1, 2], [1, 2], [1, 1]],
    [[1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 2, 2]],
    [[1, 1, 1, 1, 1], [1, 2, 2, 2, 3], [1, 1, 1, 1, 1]],
    [[1, 1, 1], [1, 1, 1], [1, 1, 1]],
]


def ar1_correlation(d: int, rho: float) -> np.ndarray:
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


SCENARIO2_R = np.array([
    [1.00, 0.18, 0.08, 0.06, 0.23, 0.14],
    [0.18, 1.00, 0.12, 0.10, 0.36, 0.24],
    [0.08, 0.12, 1.00, -0.07, -0.01, -0.21],
    [0.06, 0.10, -0.07, 1.00, 0.37, 0.29],
    [0.23, 0.36, -0.01, 0.37, 1.00, 0.41],
    [0.14, 0.24, -0.21, 0.29, 0.41, 1.00],
])
SCENARIO2_N = 6307


@dataclass
class TrueModel:
    """Data-generating model with coordinate-specific atoms.

    ``weights[l]`` has one row per second-layer group of coordinate ``l``;
    ``s_star[l]`` maps aggregated-level cells to those rows.
    """

    R: np.ndarray
    mu: list
    sigma2: list
    s: list
    s_star: list
    weights: list
    levels: tuple
    support: tuple = (0.0, 10.0)

    def __post_init__(self):
        self.R = np.asarray(self.R, float)
        self.levels = tuple(int(v) for v in self.levels)
        self.support = tuple(float(v) for v in self.support)
        self.mu = [np.asarray(m, float) for m in self.mu]
        self.sigma2 = [np.asarray(v, float) for v in self.sigma2]
        self.s = [[np.asarray(s_h, np.int64) for s_h in s_l] for s_l in self.s]
        self.s_star = [np.asarray(t, np.int64) for t in self.s_star]
        self.weights = [np.asarray(w, float) for w in self.weights]
        d = self.R.shape[0]
        if not (len(self.mu) == len(self.sigma2) == len(self.s) == len(self.s_star) == len(self.weights) == d):
            raise ValueError("per-coordinate lists must all have length d")
        if not np.allclose(np.diag(self.R), 1.0) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be a correlation matrix")
        for l in range(d):
            if not np.allclose(self.weights[l].sum(axis=1), 1.0) or np.any(self.weights[l] < 0):
                raise ValueError(f"weight rows of coordinate {l} must be simplices")
            shape = tuple(int(s_h.max()) + 1 for s_h in self.s[l])
            if self.s_star[l].shape != shape:
                raise ValueError(f"second layer of coordinate {l} must have shape {shape}")
            if self.s_star[l].max() >= len(self.weights[l]):
                raise ValueError(f"second layer of coordinate {l} refers to a missing weight row")

    @property
    def d(self) -> int:
        return self.R.shape[0]

    def groups(self, l: int) -> np.ndarray:
        """Weight row of every covariate combination (C order)."""
        return combination_groups(self.s[l], self.s_star[l])

    def combination_partition(self, l: int) -> np.ndarray:
        """Canonical clustering of the combinations by distinct weight row."""
        return canonicalize(self.groups(l))[0]

    def cond_density_all(self, l: int, grid: np.ndarray) -> np.ndarray:
        A, B = self.support
        kern = np.exp(component_logpdf(grid, self.mu[l], self.sigma2[l], A, B))  # G x K
        return (self.weights[l] @ kern.T)[self.groups(l)]

    def cond_cdf(self, l: int, x: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Mixture CDF of coordinate ``l`` at ``x`` using weight rows ``rows``."""
        A, B = self.support
        F = tn_cdf(np.asarray(x)[:, None], mean=self.mu[l][None, :], variance=self.sigma2[l][None, :],
                   lower=A, upper=B)
        return np.einsum("ik,ik->i", F, self.weights[l][rows])

    def cond_quantile(self, l: int, u: np.ndarray, rows: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        """Vectorized bisection on the mixture CDF."""
        A, B = self.support
        lo = np.full(len(u), A)
        hi = np.full(len(u), B)
        while np.max(hi - lo, initial=0.0) > tol:
            mid = 0.5 * (lo + hi)
            below = self.cond_cdf(l, mid, rows) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def as_draws(self) -> PosteriorDraws:
        """Single-draw chain whose shared atom pool concatenates all coordinates' atoms."""
        mu = np.concatenate(self.mu)
        s2 = np.concatenate(self.sigma2)
        K = len(mu)
        K_star = max(len(w) for w in self.weights)
        lam = np.zeros((self.d, K_star, K))
        start = 0
        for l, w in enumerate(self.weights):
            lam[l, :len(w), start:start + w.shape[1]] = w
            lam[l, len(w):, start:start + w.shape[1]] = w[0]
            start += w.shape[1]
        V = np.linalg.cholesky(self.R)
        dr = Draw(iteration=0, s=[list(s_l) for s_l in self.s], s_star=list(self.s_star),
                  lambda_hat=lam, eta_hat=[[] for _ in range(self.d)],
                  eta_star_hat=np.zeros((self.d, K_star)), lambda0=np.zeros((self.d, K)),
                  mu=mu, sigma2=s2, alpha=np.nan, phi=np.nan, b_idx=np.zeros(0, np.int64),
                  theta_idx=np.zeros(0, np.int64), b=np.zeros(0), theta=np.zeros(0), R=V @ V.T)
        pd = PosteriorDraws([dr], self.levels, self.support, K, K_star, {"source": "truth"})
        return pd

    def to_json(self) -> dict:
        return {"schema": "flower.truth/1", "levels": list(self.levels), "support": list(self.support),
                "R": self.R.tolist(),
                "coordinates": [{"mu": self.mu[l].tolist(), "sigma2": self.sigma2[l].tolist(),
                                 "s": [s_h.tolist() for s_h in self.s[l]],
                                 "s_star": self.s_star[l].tolist(),
                                 "weights": self.weights[l].tolist()} for l in range(self.d)]}

    @classmethod
    def from_json(cls, obj) -> "TrueModel":
        if not isinstance(obj, dict):
            with open(obj) as fh:
                obj = json.load(fh)
        if obj.get("schema") != "flower.truth/1":
            raise ValueError("not a flower.truth/1 document")
        co = obj["coordinates"]
        return cls(R=obj["R"], mu=[c["mu"] for c in co], sigma2=[c["sigma2"] for c in co],
                   s=[c["s"] for c in co], s_star=[c["s_star"] for c in co],
                   weights=[c["weights"] for c in co], levels=obj["levels"], support=obj["support"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def sample_dataset(model: TrueModel, codes: np.ndarray, rng: np.random.Generator) -> Dataset:
    """Gaussian draw with correlation R, pushed through each conditional mixture quantile."""
    codes = np.asarray(codes, dtype=np.int64)
    n = codes.shape[1]
    combo = np.ravel_multi_index(tuple(codes), model.levels) if n else np.zeros(0, np.int64)
    V = np.linalg.cholesky(model.R)
    xd = V @ rng.standard_normal((model.d, n))
    u = ndtr(xd)
    x = np.empty((model.d, n))
    for l in range(model.d):
        x[l] = model.cond_quantile(l, u[l], model.groups(l)[combo])
    return Dataset(x, codes, model.levels, model.support)


def uniform_covariates(levels, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([rng.integers(d_h, size=n) for d_h in levels]).astype(np.int64)


def scenario1_model(rng: np.random.Generator) -> TrueModel:
    d, K = SCENARIO1_MU.shape
    s, s_star, weights = [], [], []
    for l in range(d):
        s_l = [np.asarray(SCENARIO1_PARTITIONS[h][l]) - 1 for h in range(len(SCENARIO1_LEVELS))]
        shape = tuple(int(s_h.max()) + 1 for s_h in s_l)
        V = int(np.prod(shape))
        s.append(s_l)
        s_star.append(np.arange(V).reshape(shape))  # every aggregated cell has its own weights
        weights.append(rng.dirichlet(np.full(K, 2.0 / K), size=V))
    return TrueModel(R=ar1_correlation(d, 0.7), mu=list(SCENARIO1_MU),
                     sigma2=[np.full(K, SCENARIO1_SIGMA ** 2)] * d, s=s, s_star=s_star,
                     weights=weights, levels=SCENARIO1_LEVELS, support=(0.0, 10.0))


def scenario1(n: int, rng: np.random.Generator):
    """(TrueModel, Dataset) for the three-coordinate, five-covariate scenario."""
    if n < 1:
        raise ValueError("n must be positive")
    model = scenario1_model(rng)
    codes = uniform_covariates(SCENARIO1_LEVELS, n, rng)
    return model, sample_dataset(model, codes, rng)


def scenario2(artifact, codes: np.ndarray, rng: np.random.Generator, R: np.ndarray | None = None) -> Dataset:
    """Redraw responses from a fitted artifact and the fixed six-coordinate correlation block.

    ``artifact`` is a TrueModel, a ``flower.truth/1`` dict, or a path to one.
    """
    if artifact is None:
        raise FileNotFoundError("scenario 2 needs a fitted artifact")
    model = artifact if isinstance(artifact, TrueModel) else TrueModel.from_json(artifact)
    d = model.d
    if R is None:
        if d > SCENARIO2_R.shape[0]:
            raise ValueError(f"the fixed correlation block covers at most {SCENARIO2_R.shape[0]} coordinates")
        R = SCENARIO2_R[:d, :d]
    model = TrueModel(R, model.mu, model.sigma2, model.s, model.s_star, model.weights,
                      model.levels, model.support)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[0] != len(model.levels):
        raise ValueError("covariate rows do not match the artifact")
    return sample_dataset(model, codes, rng)


# A synthetic stand-in for a fitted dietary-survey artifact: four coordinates,
# covariates sex (2), age (7), race (6), income (6) with uneven level shares.
SURVEY_LEVELS = (2, 7, 6, 6)
SURVEY_LEVEL_NAMES = (
    ("Female", "Male"),
    ("[1,2)", "[2,10)", "[10,20)", "[20,40)", "[40,60)", "[60,70)", "70+"),
    ("Asian", "Black", "Mexican American", "Other", "Other Hispanic", "White"),
    ("[0,20000)", "[20000,35000)", "[35000,55000)", "[55000,100000)", "100000+", "NA"),
)
SURVEY_SHARES = (
    (0.5, 0.5),
    (0.05, 0.15, 0.15, 0.2, 0.2, 0.1, 0.15),
    (0.1, 0.2, 0.2, 0.05, 0.1, 0.35),
    (0.2, 0.15, 0.2, 0.2, 0.15, 0.1),
)
SURVEY_PARTITIONS = [  # per coordinate: sex, age, race, income
    [[0, 0], [0, 1, 2, 3, 3, 3, 3], [0, 1, 1, 1, 2, 1], [0, 0, 0, 0, 0, 0]],
    [[0, 1], [0, 1, 2, 3, 3, 3, 4], [0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0]],
    [[0, 0], [0, 1, 2, 0, 0, 0, 0], [0, 0, 0, 0, 0, 1], [0, 0, 0, 0, 0, 1]],
    [[0, 1], [0, 1, 2, 3, 2, 2, 4], [0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0]],
]
SURVEY_DENSITY_OF_CELL = [  # distinct densities per coordinate, C order over aggregated cells
    [0, 1, 0, 1, 1, 2, 2, 3, 2, 3, 3, 3],
    [0, 1, 2, 2, 3, 1, 1, 3, 2, 0],
    [0, 1, 1, 2, 1, 1, 2, 3, 2, 3, 3, 3],
    [0, 1, 2, 3, 3, 1, 0, 2, 2, 1],
]
SURVEY_LOCATIONS = (1.0, 2.4, 3.8, 5.2)


def survey_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([rng.choice(len(sh), size=n, p=sh) for sh in SURVEY_SHARES]).astype(np.int64)


def survey_artifact() -> TrueModel:
    """Right-skewed three-component densities, one set per distinct group."""
    offsets = np.array([0.0, 1.2, 3.0])
    sds = np.array([0.5, 0.8, 1.3])
    mix = np.array([0.55, 0.3, 0.15])
    mu, sigma2, s_star, weights = [], [], [], []
    for l, cells in enumerate(SURVEY_DENSITY_OF_CELL):
        shape = tuple(max(s_h) + 1 for s_h in SURVEY_PARTITIONS[l])
        n_groups = max(cells) + 1
        locs = np.asarray(SURVEY_LOCATIONS[:n_groups]) + 0.2 * l
        mu.append(np.concatenate([m + offsets for m in locs]))
        sigma2.append(np.tile(sds ** 2, n_groups))
        w = np.zeros((n_groups, 3 * n_groups))
        for g in range(n_groups):
            w[g, 3 * g:3 * g + 3] = mix
        weights.append(w)
        s_star.append(np.asarray(cells).reshape(shape))
    d = len(SURVEY_PARTITIONS)
    return TrueModel(R=SCENARIO2_R[:d, :d], mu=mu, sigma2=sigma2, s=SURVEY_PARTITIONS, s_star=s_star,
                     weights=weights, levels=SURVEY_LEVELS, support=(0.0, 10.0))


def artifact_from_draws(draws: PosteriorDraws, partitions, max_draws: int = 50) -> TrueModel:
    """Freeze a fit into a TrueModel: MAP layers, densities averaged over matching draws."""
    from .estimators import canonical_configuration, correlation_estimate
    d = len(draws.draws[0].s)
    mu, sigma2, s_star, weights = [], [], [], []
    for l in range(d):
        target = canonical_configuration(partitions.s[l], partitions.s_star[l])
        match = [dr for dr in draws.draws if canonical_configuration(dr.s[l], dr.s_star[l]) == target]
        match = match[-max_draws:] or draws.draws[-1:]
        ref = combination_groups(partitions.s[l], partitions.s_star[l])
        n_groups = int(ref.max()) + 1
        # representative combination for each reference group
        rep = np.array([int(np.flatnonzero(ref == g)[0]) for g in range(n_groups)])
        w = np.zeros((n_groups, 0))
        m_l, v_l = [], []
        for dr in match:
            rows = combination_groups(dr.s[l], dr.s_star[l])[rep]
            w = np.hstack([w, dr.lambda_hat[l][rows] / len(match)])
            m_l.append(dr.mu)
            v_l.append(dr.sigma2)
        mu.append(np.concatenate(m_l))
        sigma2.append(np.concatenate(v_l))
        weights.append(w / w.sum(axis=1, keepdims=True))
        s_star.append(np.asarray(partitions.s_star[l]))
    R = correlation_estimate(draws).R
    return TrueModel(R=R, mu=mu, sigma2=sigma2, s=[list(s_l) for s_l in partitions.s], s_star=s_star,
                     weights=weights, levels=draws.levels, support=draws.support)
