"""Mixture-side updates: allocations, base measure, concentrations and atoms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import kernels
from .dist import (LOG_SQRT_2PI, log_normalizer_scalar, log_normalizer, tn_logpdf,
                   tn_logpdf_scalar, tn_quantile_scalar)
from .partition import CoordinatePartition


@dataclass
class Atoms:
    mu: np.ndarray
    sigma2: np.ndarray

    def copy(self) -> "Atoms":
        return Atoms(self.mu.copy(), self.sigma2.copy())


@dataclass
class AdaptState:
    """Log-scale random-walk variances for alpha and phi, with window counters."""

    var_alpha: float = 0.5
    var_phi: float = 0.5
    every: int = 50
    target: float = 0.44
    window_alpha: int = 0
    window_phi: int = 0
    window_len: int = 0
    accepted_alpha: int = 0
    accepted_phi: int = 0
    proposed: int = 0
    history: list = field(default_factory=list, repr=False)


def component_logpdf(x: np.ndarray, mu: np.ndarray, sigma2: np.ndarray, A: float, B: float) -> np.ndarray:
    """Log truncated-normal density of every x against every component (n x K)."""
    sd = np.sqrt(sigma2)
    lognorm = log_normalizer((A - mu) / sd, (B - mu) / sd)
    zz = (x[:, None] - mu[None, :]) / sd[None, :]
    return -0.5 * zz * zz - (LOG_SQRT_2PI + np.log(sd) + lognorm)[None, :]


def update_z(part: CoordinatePartition, z_l: np.ndarray, x_l: np.ndarray, atoms: Atoms,
             prior_w: np.ndarray, A: float, B: float, rng: np.random.Generator):
    """Sequential leave-one-out Gibbs sweep over the allocations of one coordinate."""
    lp = component_logpdf(x_l, atoms.mu, atoms.sigma2, A, B)
    rel = np.exp(lp - lp.max(axis=1, keepdims=True))
    u = rng.uniform(size=len(z_l))
    kernels.sweep_z(np.ascontiguousarray(rel), z_l, part.group, part.cell, part.n_star,
                    part.cell_counts, np.ascontiguousarray(prior_w, dtype=float), u,
                    np.empty(part.K))


def z_conditional(part: CoordinatePartition, i: int, z_l: np.ndarray, x_l: np.ndarray,
                  atoms: Atoms, prior_w: np.ndarray, A: float, B: float) -> np.ndarray:
    """Normalized full conditional of z_i (for checks; counts exclude unit i)."""
    counts = part.n_star[part.group[i]].astype(float).copy()
    counts[z_l[i]] -= 1
    lp = tn_logpdf(x_l[i], atoms.mu, atoms.sigma2, A, B)
    w = (prior_w + counts) * np.exp(lp - lp.max())
    return w / w.sum()


def crt_tables(n_star: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-component table totals of Chinese-restaurant auxiliaries.

    For every (group, component) count ``n`` draws Bernoulli(a_k / (j - 1 + a_k))
    for j = 1..n and sums over groups.
    """
    Ks, K = n_star.shape
    counts = n_star.reshape(-1)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(K, dtype=np.int64)
    comp = np.tile(np.arange(K), Ks)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    j_minus_1 = np.arange(total) - starts
    a_rep = np.repeat(a[comp], counts)
    hits = rng.uniform(size=total) < a_rep / (j_minus_1 + a_rep)
    return np.bincount(np.repeat(comp, counts)[hits], minlength=K).astype(np.int64)


def sample_dirichlet(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    g = rng.standard_gamma(conc)
    g = np.maximum(g, np.finfo(float).tiny)
    return g / g.sum()


def update_lambda0(part: CoordinatePartition, lambda0: np.ndarray, alpha: float, alpha0: float,
                   rng: np.random.Generator) -> np.ndarray:
    K = len(lambda0)
    t = crt_tables(part.n_star, alpha * lambda0, rng)
    return sample_dirichlet(rng, alpha0 / K + t)


def log_gamma_prior(v: float, shape: float, scale: float) -> float:
    return (shape - 1.0) * np.log(v) - v / scale


def log_p_alpha(alpha: float, n_stars, lambda0: np.ndarray, a_alpha: float, b_alpha: float) -> float:
    out = log_gamma_prior(alpha, a_alpha, b_alpha)
    for l, n_star in enumerate(n_stars):
        N = n_star.sum(axis=1)
        rows = N > 0
        if not np.any(rows):
            continue
        a = alpha * lambda0[l]
        ns = n_star[rows]
        out += float(np.sum(gammaln(a + ns) - gammaln(a))
                     - np.sum(gammaln(alpha + N[rows]) - gammaln(alpha)))
    return out


def log_p_phi(phi: float, s_lists, a_phi: float, b_phi: float) -> float:
    out = log_gamma_prior(phi, a_phi, b_phi)
    for s_list in s_lists:
        for s_h in s_list:
            d_h = len(s_h)
            m = np.bincount(s_h, minlength=d_h)
            m = m[m > 0]
            out += float(gammaln(phi) - gammaln(phi + d_h)
                         + np.sum(gammaln(phi / d_h + m) - gammaln(phi / d_h)))
    return out


def mh_log_scale(cur: float, log_target, var: float, rng: np.random.Generator) -> tuple[float, bool]:
    """Log-normal random walk; the (new / cur) factor is the Jacobian of the log map."""
    new = float(np.exp(np.log(cur) + np.sqrt(var) * rng.standard_normal()))
    log_r = log_target(new) - log_target(cur) + np.log(new) - np.log(cur)
    if np.log(rng.uniform()) < log_r:
        return new, True
    return cur, False


def adapt_proposals(adapt: AdaptState, b: int) -> AdaptState:
    """Window bookkeeping; every ``adapt.every`` iterations nudge the log-variances."""
    adapt.window_len += 1
    if adapt.window_len < adapt.every:
        return adapt
    step = min(0.01, b ** -0.5)
    for name in ("alpha", "phi"):
        rate = getattr(adapt, f"window_{name}") / adapt.window_len
        var = getattr(adapt, f"var_{name}")
        if rate > adapt.target:
            var = float(np.exp(np.log(var) + step))
        elif rate < adapt.target:
            var = float(np.exp(np.log(var) - step))
        setattr(adapt, f"var_{name}", var)
        setattr(adapt, f"window_{name}", 0)
    adapt.history.append((b, adapt.var_alpha, adapt.var_phi))
    adapt.window_len = 0
    return adapt


def atom_stats(x: np.ndarray, z: np.ndarray, K: int):
    """Per-component count, sum and sum of squares pooled over all coordinates."""
    zf, xf = z.reshape(-1), x.reshape(-1)
    N = np.bincount(zf, minlength=K).astype(float)
    S1 = np.bincount(zf, weights=xf, minlength=K)
    S2 = np.bincount(zf, weights=xf * xf, minlength=K)
    return N, S1, S2


def pooled_tn_loglik(mu: float, sigma2: float, N: float, S1: float, S2: float, A: float, B: float) -> float:
    """sum of TN log densities of N points with sum S1 and sum of squares S2."""
    if N == 0:
        return 0.0
    sd = math.sqrt(sigma2)
    ss = S2 - 2.0 * mu * S1 + N * mu * mu
    return (-N * (LOG_SQRT_2PI + math.log(sd) + log_normalizer_scalar((A - mu) / sd, (B - mu) / sd))
            - 0.5 * ss / sigma2)


def sigma_window(s2: float) -> tuple[float, float]:
    return max(0.0, s2 - 1.0), s2 + 1.0


def update_atoms(k: int, atoms: Atoms, stats, hp, rng: np.random.Generator) -> tuple[bool, bool]:
    """Metropolis-Hastings for mu_k then sigma2_k with truncated-normal proposals."""
    A, B = hp.support
    N, S1, S2 = stats[0][k], stats[1][k], stats[2][k]
    mu, s2 = float(atoms.mu[k]), float(atoms.sigma2[k])

    def log_p_mu(m):
        return tn_logpdf_scalar(m, hp.m0, hp.s0 ** 2, A, B) + pooled_tn_loglik(m, s2, N, S1, S2, A, B)

    mu_new = tn_quantile_scalar(rng.uniform(), mu, hp.var_mu, A, B)
    log_r = (log_p_mu(mu_new) - log_p_mu(mu)
             + tn_logpdf_scalar(mu, mu_new, hp.var_mu, A, B) - tn_logpdf_scalar(mu_new, mu, hp.var_mu, A, B))
    acc_mu = bool(np.log(rng.uniform()) < log_r)
    if acc_mu:
        mu = mu_new
        atoms.mu[k] = mu

    def log_p_s2(v):
        return (-(hp.a_sigma + 1.0) * math.log(v) - hp.b_sigma / v
                + pooled_tn_loglik(mu, v, N, S1, S2, A, B))

    lo, hi = sigma_window(s2)
    s2_new = tn_quantile_scalar(rng.uniform(), s2, hp.var_sigma, lo, hi)
    acc_s2 = False
    if s2_new > 0:
        lo_new, hi_new = sigma_window(s2_new)
        log_r = (log_p_s2(s2_new) - log_p_s2(s2)
                 + tn_logpdf_scalar(s2, s2_new, hp.var_sigma, lo_new, hi_new)
                 - tn_logpdf_scalar(s2_new, s2, hp.var_sigma, lo, hi))
        acc_s2 = bool(np.log(rng.uniform()) < log_r)
        if acc_s2:
            atoms.sigma2[k] = s2_new
    else:
        rng.uniform()
    return acc_mu, acc_s2


def initial_atoms(K: int, A: float, B: float, b_sigma: float) -> Atoms:
    mu = A + (B - A) * (np.arange(K) + 0.5) / K
    return Atoms(mu, np.full(K, float(b_sigma)))


def initial_z(x: np.ndarray, K: int) -> np.ndarray:
    """Quantile binning of the pooled responses into K components."""
    qs = np.quantile(x.reshape(-1), np.linspace(0, 1, K + 1)[1:-1]) if K > 1 else np.array([])
    return np.searchsorted(qs, x, side="right").astype(np.int64)
