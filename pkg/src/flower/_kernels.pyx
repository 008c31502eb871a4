# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops of the sampler.

Every routine mutates its count tables in place and consumes pre-drawn
uniforms, so the pure-Python twin in ``_kernels_py`` reproduces the same
draws from the same RNG stream.
"""
from libc.math cimport lgamma, log, exp

ctypedef long long i64


def sweep_z(const double[:, ::1] rel_pdf, i64[::1] z, const i64[::1] group,
            const i64[::1] cell, i64[:, ::1] n_star, i64[:, ::1] cell_counts,
            const double[::1] prior_w, const double[::1] u, double[::1] work):
    cdef Py_ssize_t n = rel_pdf.shape[0]
    cdef Py_ssize_t K = rel_pdf.shape[1]
    cdef Py_ssize_t i, k, g, c, old, new
    cdef double total, target
    with nogil:
        for i in range(n):
            g = group[i]
            c = cell[i]
            old = z[i]
            n_star[g, old] -= 1
            cell_counts[c, old] -= 1
            total = 0.0
            for k in range(K):
                total = total + (prior_w[k] + <double>n_star[g, k]) * rel_pdf[i, k]
                work[k] = total
            target = u[i] * total
            new = K - 1
            for k in range(K):
                if work[k] > target:
                    new = k
                    break
            z[i] = new
            n_star[g, new] += 1
            cell_counts[c, new] += 1


def gibbs_s_star(i64[::1] s_star, const i64[:, ::1] cell_counts, i64[:, ::1] n_star,
                 i64[::1] m_star, const double[::1] a, double alpha, double phi_over,
                 const double[::1] u, double[::1] work):
    cdef Py_ssize_t V = cell_counts.shape[0]
    cdef Py_ssize_t K = cell_counts.shape[1]
    cdef Py_ssize_t Ks = n_star.shape[0]
    cdef Py_ssize_t v, j, ks, old, new
    cdef i64 C, N
    cdef double lp, mx, total, target, base
    with nogil:
        for v in range(V):
            old = s_star[v]
            C = 0
            for j in range(K):
                n_star[old, j] -= cell_counts[v, j]
                C += cell_counts[v, j]
            m_star[old] -= 1
            mx = -1e300
            for ks in range(Ks):
                lp = log(phi_over + <double>m_star[ks])
                if C > 0:
                    N = 0
                    for j in range(K):
                        N += n_star[ks, j]
                        if cell_counts[v, j] > 0:
                            base = a[j] + <double>n_star[ks, j]
                            lp = lp + lgamma(base + <double>cell_counts[v, j]) - lgamma(base)
                    lp = lp - (lgamma(alpha + <double>N + <double>C) - lgamma(alpha + <double>N))
                work[ks] = lp
                if lp > mx:
                    mx = lp
            total = 0.0
            for ks in range(Ks):
                total = total + exp(work[ks] - mx)
                work[ks] = total
            target = u[v] * total
            new = Ks - 1
            for ks in range(Ks):
                if work[ks] > target:
                    new = ks
                    break
            s_star[v] = new
            for j in range(K):
                n_star[new, j] += cell_counts[v, j]
            m_star[new] += 1
