"""Standard-normal and truncated-normal primitives.

All functions broadcast over numpy arrays. The truncated-normal normalizing
constant is evaluated on whichever tail keeps the subtraction well
conditioned, and in log space when both standardized bounds sit far out in
the same tail.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
CLAMP_EPS = 1e-12
_FAR_TAIL = 8.0


class ParameterError(ValueError):
    """Invalid distribution parameters."""


class DomainError(ValueError):
    """Argument outside the domain of a quantile function."""


@dataclass(frozen=True)
class TruncNormalParams:
    mean: float
    variance: float
    lower: float
    upper: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ParameterError(f"variance must be > 0, got {self.variance}")
        if not self.lower < self.upper:
            raise ParameterError(f"need lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def sd(self) -> float:
        return float(np.sqrt(self.variance))


def _check(variance, lower, upper):
    if np.any(np.asarray(variance) <= 0):
        raise ParameterError("variance must be > 0")
    if np.any(np.asarray(lower) >= np.asarray(upper)):
        raise ParameterError("need lower < upper")


def std_normal_cdf(x):
    return ndtr(x)


def std_normal_quantile(u):
    """Inverse standard-normal CDF; raises for u outside (0, 1)."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(~((u_arr > 0.0) & (u_arr < 1.0))):
        raise DomainError("std_normal_quantile needs 0 < u < 1")
    out = ndtri(u_arr)
    return out if out.ndim else float(out)


def log_normalizer(alpha, beta):
    """log(Phi(beta) - Phi(alpha)) for standardized bounds alpha < beta."""
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, float), np.asarray(beta, float))
    out = np.empty(alpha.shape)
    upper = alpha > 0  # both bounds in the upper tail: use survival functions
    lower = ~upper
    # upper tail: Phi(-alpha) - Phi(-beta)
    la = log_ndtr(-alpha[upper])
    lb = log_ndtr(-beta[upper])
    out[upper] = la + np.log1p(-np.exp(lb - la))
    la = log_ndtr(beta[lower])
    lb = log_ndtr(alpha[lower])
    out[lower] = la + np.log1p(-np.exp(lb - la))
    return out if out.ndim else float(out)


def tn_logpdf(x, mean, variance, lower, upper):
    """Log density of N(mean, variance) truncated to [lower, upper]."""
    _check(variance, lower, upper)
    x = np.asarray(x, float)
    sd = np.sqrt(variance)
    alpha = (lower - np.asarray(mean)) / sd
    beta = (upper - np.asarray(mean)) / sd
    zz = (x - mean) / sd
    out = -0.5 * zz * zz - LOG_SQRT_2PI - np.log(sd) - log_normalizer(alpha, beta)
    out = np.where((x < lower) | (x > upper), -np.inf, out)
    return out if np.ndim(out) else float(out)


def log_normalizer_scalar(alpha: float, beta: float) -> float:
    if alpha > 0:
        la, lb = log_ndtr(-alpha), log_ndtr(-beta)
    else:
        la, lb = log_ndtr(beta), log_ndtr(alpha)
    return la + math.log1p(-math.exp(lb - la))


def tn_logpdf_scalar(x: float, mean: float, variance: float, lower: float, upper: float) -> float:
    """Scalar fast path of :func:`tn_logpdf` for the sampler's inner loops."""
    if not variance > 0 or not lower < upper:
        raise ParameterError("invalid truncated-normal parameters")
    if x < lower or x > upper:
        return -math.inf
    sd = math.sqrt(variance)
    zz = (x - mean) / sd
    return (-0.5 * zz * zz - LOG_SQRT_2PI - math.log(sd)
            - log_normalizer_scalar((lower - mean) / sd, (upper - mean) / sd))


def tn_quantile_scalar(u: float, mean: float, variance: float, lower: float, upper: float) -> float:
    """Scalar fast path of :func:`tn_quantile` (same branches)."""
    if not variance > 0 or not lower < upper:
        raise ParameterError("invalid truncated-normal parameters")
    if not 0.0 <= u <= 1.0:
        raise DomainError("tn_quantile needs 0 <= u <= 1")
    if u == 0.0:
        return lower
    if u == 1.0:
        return upper
    sd = math.sqrt(variance)
    alpha, beta = (lower - mean) / sd, (upper - mean) / sd
    if alpha > 0:
        sa, sb = ndtr(-alpha), ndtr(-beta)
        out = mean - sd * ndtri(sa - u * (sa - sb))
    else:
        fa, fb = ndtr(alpha), ndtr(beta)
        out = mean + sd * ndtri(fa + u * (fb - fa))
    return float(min(max(out, lower), upper))


def tn_pdf(x, p: TruncNormalParams | None = None, *, mean=None, variance=None,
           lower=None, upper=None):
    """Truncated-normal density; zero outside the support.

    Either pass a :class:`TruncNormalParams` or the four keyword arrays.
    """
    if p is not None:
        mean, variance, lower, upper = p.mean, p.variance, p.lower, p.upper
    return np.exp(tn_logpdf(x, mean, variance, lower, upper))


def tn_cdf(x, p: TruncNormalParams | None = None, *, mean=None, variance=None,
           lower=None, upper=None):
    """Truncated-normal CDF, exactly 0 below ``lower`` and 1 above ``upper``."""
    if p is not None:
        mean, variance, lower, upper = p.mean, p.variance, p.lower, p.upper
    _check(variance, lower, upper)
    x, mean, sd, lower, upper = np.broadcast_arrays(
        np.asarray(x, float), np.asarray(mean, float), np.sqrt(np.asarray(variance, float)),
        np.asarray(lower, float), np.asarray(upper, float))
    xc = np.clip(x, lower, upper)
    alpha = (lower - mean) / sd
    beta = (upper - mean) / sd
    zz = (xc - mean) / sd
    out = np.zeros(x.shape)
    # Right-of-centre bounds: work with upper-tail mass to keep precision.
    up = alpha > 0
    lo = ~up
    with np.errstate(invalid="ignore", divide="ignore"):
        if np.any(up):
            sa, sz, sb = ndtr(-alpha[up]), ndtr(-zz[up]), ndtr(-beta[up])
            out[up] = (sa - sz) / (sa - sb)
        if np.any(lo):
            fa, fz, fb = ndtr(alpha[lo]), ndtr(zz[lo]), ndtr(beta[lo])
            out[lo] = (fz - fa) / (fb - fa)
    far = np.abs(alpha) > _FAR_TAIL
    far &= np.abs(beta) > _FAR_TAIL
    far &= np.sign(alpha) == np.sign(beta)
    if np.any(far):
        # Both bounds deep in one tail: ratio of log-space masses.
        a, z_, b = alpha[far], zz[far], beta[far]
        inner = (z_ > a) & (z_ < b)
        a, z_, b = a[inner], z_[inner], b[inner]
        log_total = log_normalizer(a, b)
        left = np.exp(log_normalizer(a, z_) - log_total)
        right = np.exp(log_normalizer(z_, b) - log_total)
        vals = np.where(left <= 0.5, left, 1.0 - right)
        far_out = out[far]
        far_out[inner] = vals
        out[far] = far_out
    out = np.clip(out, 0.0, 1.0)
    out = np.where(x <= lower, 0.0, np.where(x >= upper, 1.0, out))
    return out if out.ndim else float(out)


def tn_quantile(u, p: TruncNormalParams | None = None, *, mean=None, variance=None,
                lower=None, upper=None):
    """Inverse of :func:`tn_cdf`; returns the bounds exactly at u = 0 and 1."""
    if p is not None:
        mean, variance, lower, upper = p.mean, p.variance, p.lower, p.upper
    _check(variance, lower, upper)
    u_arr = np.asarray(u, float)
    if np.any(~((u_arr >= 0.0) & (u_arr <= 1.0))):
        raise DomainError("tn_quantile needs 0 <= u <= 1")
    u_arr, mean, sd, lower, upper = np.broadcast_arrays(
        u_arr, np.asarray(mean, float), np.sqrt(np.asarray(variance, float)),
        np.asarray(lower, float), np.asarray(upper, float))
    alpha = (lower - mean) / sd
    beta = (upper - mean) / sd
    out = np.empty(u_arr.shape)
    up = alpha > 0
    if np.any(up):
        sa, sb = ndtr(-alpha[up]), ndtr(-beta[up])
        q = sa - u_arr[up] * (sa - sb)
        with np.errstate(divide="ignore"):
            out[up] = mean[up] - sd[up] * ndtri(q)
    lo = ~up
    if np.any(lo):
        fa, fb = ndtr(alpha[lo]), ndtr(beta[lo])
        q = fa + u_arr[lo] * (fb - fa)
        with np.errstate(divide="ignore"):
            out[lo] = mean[lo] + sd[lo] * ndtri(q)
    out = np.clip(out, lower, upper)
    out = np.where(u_arr == 0.0, lower, np.where(u_arr == 1.0, upper, out))
    return out if out.ndim else float(out)


def tn_sample(rng: np.random.Generator, mean, variance, lower, upper, size=None):
    """Draw from a truncated normal by inverse-CDF sampling."""
    u = rng.uniform(size=size if size is not None else np.shape(mean))
    return tn_quantile(u, mean=mean, variance=variance, lower=lower, upper=upper)


def clamped_probit(u):
    """Phi^{-1} of ``u`` after clamping to [eps, 1 - eps]."""
    return ndtri(np.clip(u, CLAMP_EPS, 1.0 - CLAMP_EPS))
