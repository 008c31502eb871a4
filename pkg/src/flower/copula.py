"""Gaussian copula with a spherical-coordinate Cholesky parameterization.

The correlation matrix is ``R = V V^T`` where row ``l`` of the lower
triangular ``V`` is a point on the unit sphere: its last entry is
``sqrt(1 - b[l-1]^2)`` and the remaining mass ``b[l-1]`` is spread over the
earlier columns by hyperspherical angles taken from ``theta``.  Both ``b`` and
``theta`` live on fixed grids and move by nearest-neighbour Metropolis steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

from .dist import clamped_probit, tn_cdf

B_LIMIT = 0.99
THETA_LIMIT = 3.14


def n_theta(d: int) -> int:
    return (d * d - 3 * d + 2) // 2


def b_grid(M: int) -> np.ndarray:
    return -B_LIMIT + 2 * B_LIMIT * np.arange(M) / (M - 1)


def theta_grid(M: int) -> np.ndarray:
    return -THETA_LIMIT + 2 * THETA_LIMIT * np.arange(M) / (M - 1)


@dataclass
class CopulaParams:
    """Grid positions of the ``d - 1`` partial lengths and the angles."""

    d: int
    M_b: int = 101
    M_theta: int = 101
    b_idx: np.ndarray = None
    theta_idx: np.ndarray = None
    accepted_b: int = field(default=0, repr=False)
    accepted_theta: int = field(default=0, repr=False)
    proposed_b: int = field(default=0, repr=False)
    proposed_theta: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.M_b < 3 or self.M_theta < 3:
            raise ValueError("grid sizes must be >= 3")
        if self.b_idx is None:
            self.b_idx = np.full(self.d - 1, self.M_b // 2, dtype=np.int64)
        if self.theta_idx is None:
            self.theta_idx = np.full(n_theta(self.d), self.M_theta // 2, dtype=np.int64)
        self.b_idx = np.asarray(self.b_idx, dtype=np.int64)
        self.theta_idx = np.asarray(self.theta_idx, dtype=np.int64)
        if self.b_idx.shape != (self.d - 1,) or self.theta_idx.shape != (n_theta(self.d),):
            raise ValueError("index vectors do not match d")
        if np.any((self.b_idx < 0) | (self.b_idx >= self.M_b)):
            raise ValueError("b index off grid")
        if np.any((self.theta_idx < 0) | (self.theta_idx >= self.M_theta)):
            raise ValueError("theta index off grid")

    @property
    def b(self) -> np.ndarray:
        return b_grid(self.M_b)[self.b_idx]

    @property
    def theta(self) -> np.ndarray:
        return theta_grid(self.M_theta)[self.theta_idx]

    def copy(self) -> "CopulaParams":
        return CopulaParams(self.d, self.M_b, self.M_theta,
                            self.b_idx.copy(), self.theta_idx.copy())


@dataclass
class CorrelationMatrix:
    R: np.ndarray
    chol_V: np.ndarray
    precision: np.ndarray
    logdet: float


def cholesky_factor(b, theta) -> np.ndarray:
    """Lower-triangular ``V`` with unit-norm rows from (b, theta)."""
    b = np.asarray(b, float)
    theta = np.asarray(theta, float)
    d = b.size + 1
    if theta.size != n_theta(d):
        raise ValueError(f"theta must have {n_theta(d)} entries for d={d}")
    V = np.zeros((d, d))
    V[0, 0] = 1.0
    for row in range(1, d):
        ell = row + 1  # 1-based row
        bl = b[row - 1]
        m = ell - 2  # number of angles on this row
        start = (ell * ell - 5 * ell + 8) // 2 - 1
        t = theta[start:start + m]
        cum = 1.0
        for j in range(m):
            V[row, j] = bl * cum * np.sin(t[j])
            cum *= np.cos(t[j])
        V[row, m] = bl * cum
        V[row, row] = np.sqrt(1.0 - bl * bl)
    return V


def build_V(params: CopulaParams | None = None, *, b=None, theta=None) -> CorrelationMatrix:
    if params is not None:
        b, theta = params.b, params.theta
    b = np.asarray(b, float)
    if np.any(np.abs(b) >= 1):
        raise ValueError("b must lie in (-1, 1)")
    V = cholesky_factor(b, theta)
    R = V @ V.T
    Vinv = solve_triangular(V, np.eye(len(V)), lower=True)
    logdet = float(np.sum(np.log1p(-b * b)))
    return CorrelationMatrix(R=R, chol_V=V, precision=Vinv.T @ Vinv, logdet=logdet)


def quad_forms(V: np.ndarray, y: np.ndarray) -> np.ndarray:
    """y_i^T R^{-1} y_i for each column of ``y`` via a triangular solve."""
    w = solve_triangular(V, y, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", w, w) if w.ndim == 2 else float(w @ w)


def copula_log_density(y, R: CorrelationMatrix):
    """Log Gaussian-copula density at latent normal scores ``y`` (d or d x n)."""
    y = np.asarray(y, float)
    if y.shape[0] != R.R.shape[0]:
        raise ValueError(f"y has {y.shape[0]} rows, R is {R.R.shape[0]}-dimensional")
    q = quad_forms(R.chol_V, y)
    yy = np.einsum("i...,i...->...", y, y)
    return -0.5 * R.logdet - 0.5 * (q - yy)


def gaussian_loglik(y: np.ndarray, b, theta) -> float:
    """sum_i log N(y_i; 0, R) up to the 2*pi constant."""
    V = cholesky_factor(b, theta)
    n = y.shape[1]
    logdet = float(np.sum(np.log1p(-np.asarray(b) ** 2)))
    return -0.5 * n * logdet - 0.5 * float(np.sum(quad_forms(V, y)))


def latent_y(x, z, mu, sigma2, lower, upper) -> np.ndarray:
    """Normal scores Phi^{-1}(F_TN(x; mu_z, sigma2_z)) with boundary clamping."""
    z = np.asarray(z)
    u = tn_cdf(x, mean=np.asarray(mu)[z], variance=np.asarray(sigma2)[z],
               lower=lower, upper=upper)
    return clamped_probit(u)


def marginal_latent_y(x, weights, mu, sigma2, lower, upper) -> np.ndarray:
    """Normal scores through the full mixture CDF.

    ``weights`` is (d, n, K): the mixture weights attached to each unit.
    Kernel means must lie inside [lower, upper] (true for the sampler's atoms),
    so the standardized bounds straddle zero and plain differences are stable.
    """
    x = np.asarray(x, float)
    mu = np.asarray(mu, float)
    sd = np.sqrt(np.asarray(sigma2, float))
    Fa = ndtr((lower - mu) / sd)
    mass = ndtr((upper - mu) / sd) - Fa
    out = np.empty(x.shape)
    for l in range(x.shape[0]):
        F = (ndtr((x[l][:, None] - mu[None, :]) / sd[None, :]) - Fa) / mass
        out[l] = np.einsum("ik,ik->i", F, weights[l])
    return clamped_probit(np.clip(out, 0.0, 1.0))


def _neighbours(m: int, M: int) -> list[int]:
    return [j for j in (m - 1, m, m + 1) if 0 <= j < M]


def _grid_step(idx: np.ndarray, pos: int, M: int, loglik_at, current_ll: float,
               rng: np.random.Generator):
    m = int(idx[pos])
    nb = _neighbours(m, M)
    prop = nb[rng.integers(len(nb))]
    if prop == m:
        # ratio is 1; still consume a uniform so the stream stays aligned
        rng.uniform()
        return current_ll, True
    new_ll = loglik_at(prop)
    log_q = np.log(len(nb)) - np.log(len(_neighbours(prop, M)))
    if np.log(rng.uniform()) < new_ll - current_ll + log_q:
        idx[pos] = prop
        return new_ll, True
    return current_ll, False


def update_b(cp: CopulaParams, y: np.ndarray, rng: np.random.Generator) -> CopulaParams:
    """One fixed-order Metropolis scan over the partial lengths ``b``."""
    bg = b_grid(cp.M_b)
    theta = cp.theta
    ll = gaussian_loglik(y, cp.b, theta)
    for s in range(cp.d - 1):
        def at(m, s=s):
            b = cp.b.copy()
            b[s] = bg[m]
            return gaussian_loglik(y, b, theta)
        ll, acc = _grid_step(cp.b_idx, s, cp.M_b, at, ll, rng)
        cp.proposed_b += 1
        cp.accepted_b += acc
    return cp


def update_theta(cp: CopulaParams, y: np.ndarray, rng: np.random.Generator) -> CopulaParams:
    """One fixed-order Metropolis scan over the angles ``theta``."""
    tg = theta_grid(cp.M_theta)
    b = cp.b
    ll = gaussian_loglik(y, b, cp.theta)
    for s in range(n_theta(cp.d)):
        def at(m, s=s):
            th = cp.theta.copy()
            th[s] = tg[m]
            return gaussian_loglik(y, b, th)
        ll, acc = _grid_step(cp.theta_idx, s, cp.M_theta, at, ll, rng)
        cp.proposed_theta += 1
        cp.accepted_theta += acc
    return cp


def nearest_params(R: np.ndarray, M_b: int = 101, M_theta: int = 101) -> CopulaParams:
    """Grid parameters whose correlation matrix is closest to ``R``.

    Inverts the spherical map row by row from the Cholesky factor of ``R``
    and snaps each coordinate to its grid.
    """
    V = np.linalg.cholesky(np.asarray(R, float))
    d = len(V)
    b = np.zeros(d - 1)
    theta = np.zeros(n_theta(d))
    if d > 1:
        b[0] = V[1, 0]
    for row in range(2, d):
        ell = row + 1
        bl = np.sqrt(max(0.0, 1.0 - V[row, row] ** 2))
        b[row - 1] = bl
        if bl == 0:
            continue
        m = ell - 2
        start = (ell * ell - 5 * ell + 8) // 2 - 1
        r = V[row, :row] / bl
        for j in range(m - 1):
            theta[start + j] = np.arctan2(r[j], np.sqrt(np.sum(r[j + 1:] ** 2)))
        scale = np.prod(np.cos(theta[start:start + m - 1]))
        theta[start + m - 1] = np.arctan2(r[m - 1] / scale, r[m] / scale)
    bg, tg = b_grid(M_b), theta_grid(M_theta)
    b_idx = np.abs(bg[None, :] - b[:, None]).argmin(axis=1)
    theta_wrapped = (theta + np.pi) % (2 * np.pi) - np.pi
    t_idx = np.abs(tg[None, :] - theta_wrapped[:, None]).argmin(axis=1) if theta.size else np.zeros(0, int)
    return CopulaParams(d, M_b, M_theta, b_idx, t_idx)
