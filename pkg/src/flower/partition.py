"""Two-layer covariate partitions for one response coordinate.

The first layer clusters the levels of each covariate; the second layer
(``s_star``) is a tensor over the aggregated levels whose entries pick one of
``K_star`` weight vectors.  The tensor only ever holds ``prod_h K_h`` cells:
it starts as a single cell and gains or loses whole slices as first-layer
clusters appear or vanish.

Count tables kept in sync with the component allocations ``z``:

``cell_counts[v, k]``  units in first-layer cell ``v`` allocated to component ``k``
``n_star[g, k]``       units whose cell maps to second-layer group ``g``
``m_star[g]``          cells mapped to group ``g``
"""
from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from . import kernels


def canonicalize(labels) -> tuple[np.ndarray, int]:
    """Relabel to 0..K-1 by order of first appearance; returns (labels, K)."""
    labels = np.asarray(labels)
    uniq, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(uniq))
    return rank[inv.reshape(-1)].astype(np.int64), len(uniq)


def hamming_ball_size(d_h: int) -> int:
    return 1 + d_h * (d_h - 1)


def hamming_ball_propose(s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the radius-1 Hamming ball around ``s`` over labels 0..d_h-1."""
    d_h = len(s)
    out = np.array(s, dtype=np.int64, copy=True)
    r = int(rng.integers(hamming_ball_size(d_h)))
    if r == 0:
        return out
    pos, off = divmod(r - 1, d_h - 1)
    out[pos] = off if off < s[pos] else off + 1
    return out


def grow_or_shrink(tensor: np.ndarray, h: int, new_size: int, fill: int = 0) -> np.ndarray:
    """Add or drop trailing slices of ``tensor`` along mode ``h``."""
    cur = tensor.shape[h]
    if new_size == cur:
        return tensor.copy()
    if new_size < cur:
        return np.ascontiguousarray(np.take(tensor, np.arange(new_size), axis=h))
    shape = list(tensor.shape)
    shape[h] = new_size - cur
    return np.concatenate([tensor, np.full(shape, fill, dtype=tensor.dtype)], axis=h)


def log_dm_lik(n_star: np.ndarray, a: np.ndarray, alpha: float) -> float:
    """Collapsed Dirichlet(alpha * lambda0) likelihood of the group counts."""
    N = n_star.sum(axis=1)
    rows = N > 0
    if not np.any(rows):
        return 0.0
    ns = n_star[rows]
    return float(np.sum(gammaln(a + ns) - gammaln(a)) - np.sum(gammaln(alpha + N[rows]) - gammaln(alpha)))


def log_first_layer_prior(s_h: np.ndarray, phi: float) -> float:
    """Dirichlet-multinomial prior of one labelled level partition (up to constants)."""
    d_h = len(s_h)
    m = np.bincount(s_h, minlength=d_h)
    m = m[m > 0]
    return float(np.sum(gammaln(phi / d_h + m) - gammaln(phi / d_h)))


def log_second_layer_prior(m_star: np.ndarray, phi_star: float) -> float:
    K_star = len(m_star)
    V = int(m_star.sum())
    return float(np.sum(gammaln(phi_star / K_star + m_star) - gammaln(phi_star / K_star))
                 + gammaln(phi_star) - gammaln(phi_star + V))


class CoordinatePartition:
    """Partition layers and count tables of a single response coordinate."""

    def __init__(self, levels, K: int, K_star: int, codes: np.ndarray, z: np.ndarray):
        self.levels = tuple(int(v) for v in levels)
        self.K = int(K)
        self.K_star = int(K_star)
        self.codes = codes
        self.s = [np.zeros(d_h, dtype=np.int64) for d_h in self.levels]
        self.s_star = np.zeros((1,) * len(self.levels), dtype=np.int64)
        self.accepted_s = 0
        self.proposed_s = 0
        self.rebuild(z)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.s_star.shape

    @property
    def volume(self) -> int:
        return int(self.s_star.size)

    def cells_for(self, s_list, shape) -> np.ndarray:
        idx = tuple(s_h[self.codes[h]] for h, s_h in enumerate(s_list))
        return np.ravel_multi_index(idx, shape).astype(np.int64) if idx else np.zeros(self.codes.shape[1], np.int64)

    def _counts(self, cell, group, z, V):
        K, Ks = self.K, self.K_star
        cell_counts = np.bincount(cell * K + z, minlength=V * K).reshape(V, K).astype(np.int64)
        n_star = np.bincount(group * K + z, minlength=Ks * K).reshape(Ks, K).astype(np.int64)
        return cell_counts, n_star

    def rebuild(self, z: np.ndarray):
        """Recompute every derived index and count table from scratch."""
        self.cell = self.cells_for(self.s, self.shape)
        self.group = self.s_star.reshape(-1)[self.cell]
        self.cell_counts, self.n_star = self._counts(self.cell, self.group, z, self.volume)
        self.m_star = np.bincount(self.s_star.reshape(-1), minlength=self.K_star).astype(np.int64)

    def set_layers(self, s_list, s_star, z):
        """Install a configuration (labels are canonicalized) and recount."""
        s_list = [canonicalize(s_h)[0] for s_h in s_list]
        shape = tuple(int(s_h.max()) + 1 for s_h in s_list)
        s_star = np.asarray(s_star, dtype=np.int64).reshape(shape)
        self.s = s_list
        self.s_star = np.ascontiguousarray(s_star)
        self.rebuild(z)

    def check_consistency(self, z: np.ndarray):
        """Raise AssertionError unless the tables equal a fresh recount."""
        assert self.s_star.size == int(np.prod([s_h.max() + 1 for s_h in self.s]))
        for s_h in self.s:
            assert np.array_equal(canonicalize(s_h)[0], s_h)
        cell = self.cells_for(self.s, self.shape)
        group = self.s_star.reshape(-1)[cell]
        cc, ns = self._counts(cell, group, z, self.volume)
        assert np.array_equal(cell, self.cell)
        assert np.array_equal(group, self.group)
        assert np.array_equal(cc, self.cell_counts)
        assert np.array_equal(ns, self.n_star)
        assert np.array_equal(np.bincount(self.s_star.reshape(-1), minlength=self.K_star), self.m_star)
        assert self.m_star.sum() == self.volume
        assert self.n_star.sum() == len(z)

    def log_target(self, h: int, a: np.ndarray, alpha: float, phi: float, phi_star: float,
                   s_h=None, n_star=None, m_star=None) -> float:
        """Collapsed conditional of (s_h, s_star), up to a constant."""
        s_h = self.s[h] if s_h is None else s_h
        n_star = self.n_star if n_star is None else n_star
        m_star = self.m_star if m_star is None else m_star
        return (log_dm_lik(n_star, a, alpha) + log_first_layer_prior(s_h, phi)
                + log_second_layer_prior(m_star, phi_star))

    def joint_update_s(self, h: int, z: np.ndarray, a: np.ndarray, alpha: float, phi: float,
                       phi_star: float, rng: np.random.Generator) -> bool:
        """Trans-dimensional Metropolis move on (s_h, s_star)."""
        raw = hamming_ball_propose(self.s[h], rng)
        s_new, K_new = canonicalize(raw)
        new_star = grow_or_shrink(self.s_star, h, K_new)
        new_star[...] = rng.integers(self.K_star, size=new_star.shape)
        s_list = list(self.s)
        s_list[h] = s_new
        cell = self.cells_for(s_list, new_star.shape)
        group = new_star.reshape(-1)[cell]
        cell_counts, n_star = self._counts(cell, group, z, new_star.size)
        m_star = np.bincount(new_star.reshape(-1), minlength=self.K_star).astype(np.int64)
        log_r = (self.log_target(h, a, alpha, phi, phi_star, s_new, n_star, m_star)
                 - self.log_target(h, a, alpha, phi, phi_star)
                 + (new_star.size - self.volume) * np.log(self.K_star))
        self.proposed_s += 1
        if np.log(rng.uniform()) < log_r:
            self.s = s_list
            self.s_star = new_star
            self.cell, self.group = cell, group
            self.cell_counts, self.n_star, self.m_star = cell_counts, n_star, m_star
            self.accepted_s += 1
            return True
        return False

    def gibbs_s_star(self, a: np.ndarray, alpha: float, phi_star: float,
                     rng: np.random.Generator):
        """One lexicographic Gibbs scan over all second-layer cells."""
        flat = self.s_star.reshape(-1)
        u = rng.uniform(size=flat.size)
        work = np.empty(self.K_star)
        kernels.gibbs_s_star(flat, self.cell_counts, self.n_star, self.m_star,
                             np.ascontiguousarray(a, dtype=float), float(alpha),
                             phi_star / self.K_star, u, work)
        self.group = flat[self.cell]

    def s_star_conditional(self, v: int, a: np.ndarray, alpha: float, phi_star: float) -> np.ndarray:
        """Normalized full conditional of cell ``v`` (diagnostic, not used by the sweep)."""
        cc = self.cell_counts[v]
        old = self.s_star.reshape(-1)[v]
        n_minus = self.n_star.copy()
        n_minus[old] -= cc
        m_minus = self.m_star.copy()
        m_minus[old] -= 1
        lp = np.log(phi_star / self.K_star + m_minus)
        N = n_minus.sum(axis=1)
        C = cc.sum()
        lp = lp + (gammaln(a + n_minus + cc) - gammaln(a + n_minus)).sum(axis=1)
        lp = lp - (gammaln(alpha + N + C) - gammaln(alpha + N))
        p = np.exp(lp - lp.max())
        return p / p.sum()

    def combination_labels(self) -> np.ndarray:
        """Second-layer group of every covariate combination, in C order."""
        grids = np.meshgrid(*[s_h for s_h in self.s], indexing="ij")
        return self.s_star[tuple(grids)].reshape(-1)

    def snapshot(self):
        return [s_h.copy() for s_h in self.s], self.s_star.copy()
