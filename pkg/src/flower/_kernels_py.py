"""Pure-Python twin of the compiled kernels (same signatures, same draws)."""
import numpy as np
from scipy.special import gammaln


def sweep_z(rel_pdf, z, group, cell, n_star, cell_counts, prior_w, u, work):
    K = rel_pdf.shape[1]
    for i in range(rel_pdf.shape[0]):
        g, c, old = group[i], cell[i], z[i]
        n_star[g, old] -= 1
        cell_counts[c, old] -= 1
        cum = np.cumsum((prior_w + n_star[g]) * rel_pdf[i])
        hit = np.flatnonzero(cum > u[i] * cum[-1])
        new = hit[0] if hit.size else K - 1
        z[i] = new
        n_star[g, new] += 1
        cell_counts[c, new] += 1


def gibbs_s_star(s_star, cell_counts, n_star, m_star, a, alpha, phi_over, u, work):
    Ks = n_star.shape[0]
    for v in range(cell_counts.shape[0]):
        old = s_star[v]
        cc = cell_counts[v]
        n_star[old] -= cc
        m_star[old] -= 1
        lp = np.log(phi_over + m_star)
        C = cc.sum()
        if C > 0:
            occ = cc > 0
            base = a[occ] + n_star[:, occ]
            N = n_star.sum(axis=1)
            lp = lp + (gammaln(base + cc[occ]) - gammaln(base)).sum(axis=1)
            lp = lp - (gammaln(alpha + N + C) - gammaln(alpha + N))
        cum = np.cumsum(np.exp(lp - lp.max()))
        hit = np.flatnonzero(cum > u[v] * cum[-1])
        new = hit[0] if hit.size else Ks - 1
        s_star[v] = new
        n_star[new] += cc
        m_star[new] += 1
