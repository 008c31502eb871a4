"""Posterior point estimates and evaluation metrics."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from .copula import CorrelationMatrix, copula_log_density
from .dist import clamped_probit, tn_cdf
from .mixture import component_logpdf
from .partition import canonicalize
from .sampler import PosteriorDraws, combination_groups


class GridMismatchError(ValueError):
    pass


@dataclass
class DensityEstimate:
    """Density values on an inclusive equi-spaced grid (one axis per coordinate)."""

    grid: np.ndarray
    values: np.ndarray
    coords: tuple = ()
    combo: tuple | None = None

    @property
    def delta(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def mass(self) -> float:
        return float(self.values.sum() * self.delta ** self.values.ndim)

    def to_csv(self, path, original: tuple | None = None):
        """Write ``grid,value`` rows; with ``original=(lo, hi, A, B)`` also the back-transformed columns."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.values.ndim != 1:
                raise ValueError("CSV export is for univariate estimates")
            if original is None:
                w.writerow(["grid", "value"])
                for g, v in zip(self.grid, self.values):
                    w.writerow([repr(float(g)), repr(float(v))])
            else:
                og, ov = back_transform(self, *original)
                w.writerow(["grid", "value", "grid_original", "value_original"])
                for row in zip(self.grid, self.values, og, ov):
                    w.writerow([repr(float(c)) for c in row])

    def to_json(self) -> dict:
        return {"coords": list(self.coords), "combo": None if self.combo is None else list(self.combo),
                "grid": self.grid.tolist(), "values": self.values.tolist()}


def make_grid(support, G: int = 300) -> np.ndarray:
    return np.linspace(support[0], support[1], G)


def back_transform(est: DensityEstimate, lo: float, hi: float, A: float, B: float):
    """Map a model-scale density to original units (affine map with its Jacobian)."""
    scale = (B - A) / (hi - lo)
    return lo + (est.grid - A) / scale, est.values * scale


def combo_index(levels, combo) -> int:
    combo = tuple(int(c) for c in combo)
    if len(combo) != len(levels):
        raise ValueError(f"combination needs {len(levels)} entries")
    for c, d_h in zip(combo, levels):
        if not 0 <= c < d_h:
            raise ValueError(f"covariate level {c} outside 0..{d_h - 1}")
    return int(np.ravel_multi_index(combo, levels))


def _kernel_matrix(draws: PosteriorDraws, grid: np.ndarray) -> np.ndarray:
    """(n_draws, K, G) truncated-normal kernel densities per draw."""
    A, B = draws.support
    mu, s2 = draws.mu, draws.sigma2
    out = np.empty((len(draws), mu.shape[1], len(grid)))
    for b in range(len(draws)):
        out[b] = np.exp(component_logpdf(grid, mu[b], s2[b], A, B)).T
    return out


def cond_marginal_all(l: int, draws: PosteriorDraws, grid: np.ndarray, kernels=None) -> np.ndarray:
    """Conditional marginal estimates of coordinate ``l`` for every combination (C x G)."""
    kern = _kernel_matrix(draws, grid) if kernels is None else kernels
    groups = draws.combo_groups(l)
    lam = draws.lambda_hat[:, l]  # (n_draws, K_star, K)
    out = np.zeros((groups.shape[1], len(grid)))
    for b in range(len(draws)):
        dens = lam[b] @ kern[b]  # (K_star, G)
        out += dens[groups[b]]
    return out / len(draws)


def cond_marginal_density(l: int, combo, draws: PosteriorDraws, grid: np.ndarray) -> DensityEstimate:
    c = combo_index(draws.levels, combo)
    kern = _kernel_matrix(draws, grid)
    vals = np.zeros(len(grid))
    for b, dr in enumerate(draws.draws):
        g = combination_groups(dr.s[l], dr.s_star[l])[c]
        vals += dr.lambda_hat[l, g] @ kern[b]
    return DensityEstimate(grid, vals / len(draws), (l,), tuple(combo))


def _mixture_cdf(x, weights, mu, s2, A, B):
    return tn_cdf(x[:, None], mean=mu[None, :], variance=s2[None, :], lower=A, upper=B) @ weights


def cond_joint_density(L, combo, draws: PosteriorDraws, grid: np.ndarray) -> DensityEstimate:
    """Joint density of the coordinates in ``L`` given ``combo`` on the product grid."""
    L = tuple(int(l) for l in L)
    if len(L) < 2:
        raise ValueError("joint density needs at least two coordinates")
    A, B = draws.support
    c = combo_index(draws.levels, combo)
    G = len(grid)
    shape = (G,) * len(L)
    acc = np.zeros(shape)
    for dr in draws.draws:
        kern = np.exp(component_logpdf(grid, dr.mu, dr.sigma2, A, B))  # (G, K)
        marg, ys = [], []
        for l in L:
            w = dr.lambda_hat[l, combination_groups(dr.s[l], dr.s_star[l])[c]]
            marg.append(kern @ w)
            ys.append(clamped_probit(_mixture_cdf(grid, w, dr.mu, dr.sigma2, A, B)))
        mesh = np.meshgrid(*ys, indexing="ij")
        y = np.stack([m.reshape(-1) for m in mesh])
        R_L = dr.R[np.ix_(L, L)]
        V = np.linalg.cholesky(R_L)
        logdet = float(np.linalg.slogdet(R_L)[1])
        cop = np.exp(copula_log_density(y, CorrelationMatrix(R_L, V, np.linalg.inv(R_L), logdet)))
        prod = marg[0]
        for m in marg[1:]:
            prod = np.multiply.outer(prod, m)
        acc += prod * cop.reshape(shape)
    return DensityEstimate(grid, acc / len(draws), L, tuple(combo))


def combination_weights(codes: np.ndarray, levels) -> np.ndarray:
    """Empirical frequency of every covariate combination (C order)."""
    flat = np.ravel_multi_index(tuple(codes), levels) if codes.shape[1] else np.zeros(0, int)
    w = np.bincount(flat, minlength=int(np.prod(levels))).astype(float)
    return w / w.sum() if w.sum() else w


def uncond_density(l: int, draws: PosteriorDraws, codes: np.ndarray, grid: np.ndarray,
                   cond: np.ndarray | None = None) -> DensityEstimate:
    """Covariate-averaged marginal density with empirical combination weights."""
    w = combination_weights(codes, draws.levels)
    cond = cond_marginal_all(l, draws, grid) if cond is None else cond
    return DensityEstimate(grid, w @ cond, (l,), None)


@dataclass
class PartitionEstimate:
    s: list          # per coordinate: list of label arrays
    s_star: list     # per coordinate: tensor
    frequency: list  # per coordinate: share of draws with this configuration

    def combination_partition(self, l: int) -> np.ndarray:
        return canonicalize(combination_groups(self.s[l], self.s_star[l]))[0]

    def to_json(self, names=None, level_names=None) -> dict:
        out = []
        for l in range(len(self.s)):
            covs = {}
            for h, s_h in enumerate(self.s[l]):
                key = names[h] if names else str(h)
                labels = level_names[h] if level_names else [str(q) for q in range(len(s_h))]
                covs[key] = {lab: int(v) + 1 for lab, v in zip(labels, s_h)}
            out.append({"coordinate": l, "frequency": self.frequency[l], "first_layer": covs,
                        "second_layer": (np.asarray(self.s_star[l]) + 1).tolist()})
        return {"partitions": out}


def canonical_configuration(s_list, s_star) -> tuple:
    """Hashable canonical form of (s, s_star) with second-layer labels by first appearance."""
    s_list = [canonicalize(s_h)[0] for s_h in s_list]
    shape = tuple(int(s_h.max()) + 1 for s_h in s_list)
    star = np.asarray(s_star).reshape(shape)
    star = canonicalize(star.reshape(-1))[0].reshape(shape)
    return tuple(tuple(s_h.tolist()) for s_h in s_list), tuple(star.reshape(-1).tolist()), shape


def map_partitions(draws: PosteriorDraws) -> PartitionEstimate:
    """Most frequent canonical joint configuration per coordinate; ties go to the earliest."""
    if len(draws) == 0:
        raise ValueError("need at least one draw")
    d = len(draws.draws[0].s)
    s_out, star_out, freq = [], [], []
    for l in range(d):
        keys = [canonical_configuration(dr.s[l], dr.s_star[l]) for dr in draws.draws]
        counts = Counter(keys)
        best = max(counts.values())
        key = next(k for k in keys if counts[k] == best)
        s_list, star, shape = key
        s_out.append([np.array(s_h, dtype=np.int64) for s_h in s_list])
        star_out.append(np.array(star, dtype=np.int64).reshape(shape))
        freq.append(best / len(keys))
    return PartitionEstimate(s_out, star_out, freq)


def cluster_conditional_density(l: int, k_star: int, reference: PartitionEstimate,
                                draws: PosteriorDraws, grid: np.ndarray,
                                cond: np.ndarray | None = None) -> DensityEstimate:
    """Unweighted average of conditional densities over the combinations in one cluster."""
    labels = combination_groups(reference.s[l], reference.s_star[l])
    members = np.flatnonzero(labels == k_star)
    if members.size == 0:
        raise ValueError(f"second-layer cluster {k_star} is empty")
    cond = cond_marginal_all(l, draws, grid) if cond is None else cond
    return DensityEstimate(grid, cond[members].mean(axis=0), (l,), None)


def ise(f_true: DensityEstimate, f_hat: DensityEstimate) -> float:
    """Integrated squared error on a shared grid."""
    if f_true.grid.shape != f_hat.grid.shape or not np.array_equal(f_true.grid, f_hat.grid):
        raise GridMismatchError("estimates live on different grids")
    if f_true.values.shape != f_hat.values.shape:
        raise GridMismatchError("estimates have different shapes")
    diff = f_true.values - f_hat.values
    return float(np.sum(diff * diff) * f_true.delta ** diff.ndim)


def ari(p1, p2) -> float:
    """Adjusted Rand index between two labelings of the same items."""
    p1, p2 = np.asarray(p1), np.asarray(p2)
    if p1.shape != p2.shape:
        raise ValueError("partitions are over different ground sets")
    n = p1.size
    _, a = np.unique(p1, return_inverse=True)
    _, b = np.unique(p2, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def correlation_estimate(draws: PosteriorDraws) -> CorrelationMatrix:
    """Posterior mean of R with its diagonal renormalized to one."""
    R = draws.R.mean(axis=0)
    R = 0.5 * (R + R.T)
    s = np.sqrt(np.diag(R))
    R = R / np.outer(s, s)
    V = np.linalg.cholesky(R)
    return CorrelationMatrix(R, V, np.linalg.inv(R), float(np.linalg.slogdet(R)[1]))


def write_partitions(path, est: PartitionEstimate, names=None, level_names=None):
    with open(path, "w") as fh:
        json.dump(est.to_json(names, level_names), fh, indent=2)


def write_matrix_csv(path, M: np.ndarray):
    np.savetxt(path, M, delimiter=",", fmt="%.17g")


def score_against_truth(truth, draws: PosteriorDraws, G: int = 300, partitions=None) -> dict:
    """ISE per (coordinate, combination) and ARI per coordinate against a known model.

    ``truth`` needs ``cond_density_all(l, grid)`` and ``combination_partition(l)``.
    """
    grid = make_grid(draws.support, G)
    delta = grid[1] - grid[0]
    partitions = map_partitions(draws) if partitions is None else partitions
    kern = _kernel_matrix(draws, grid)
    ises, aris = [], []
    for l in range(len(draws.draws[0].s)):
        est = cond_marginal_all(l, draws, grid, kern)
        diff = truth.cond_density_all(l, grid) - est
        ises.append((diff * diff).sum(axis=1) * delta)
        aris.append(ari(truth.combination_partition(l), partitions.combination_partition(l)))
    ises = np.array(ises)
    return {"ise_mean": float(ises.mean()), "ise_sum": float(ises.sum()),
            "ise_per_coordinate": ises.mean(axis=1).tolist(), "ari_mean": float(np.mean(aris)),
            "ari_per_coordinate": [float(a) for a in aris],
            "map_frequency": [float(f) for f in partitions.frequency]}
