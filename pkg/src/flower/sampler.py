"""Chain orchestration, retained draws and the record-per-draw chain store."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import copula, mixture
from .copula import CopulaParams, build_V
from .partition import CoordinatePartition

log = logging.getLogger("flower")

STORE_SCHEMA = "flower.draws/1"

# named RNG streams, one per (module, coordinate)
STREAM_Z, STREAM_LAMBDA0, STREAM_PARTITION, STREAM_SSTAR = 1, 2, 3, 4
STREAM_CONC, STREAM_ATOMS, STREAM_COPULA = 5, 6, 7


class IngestionError(ValueError):
    pass


@dataclass
class Dataset:
    """Responses ``x`` (d x n) on [A, B] and 0-based covariate codes (p x n)."""

    x: np.ndarray
    codes: np.ndarray
    levels: tuple
    support: tuple = (0.0, 10.0)

    def __post_init__(self):
        self.x = np.ascontiguousarray(np.asarray(self.x, dtype=float))
        if self.x.ndim != 2:
            raise IngestionError("x must be a d x n matrix")
        n = self.x.shape[1]
        self.levels = tuple(int(v) for v in self.levels)
        rows = len(self.levels) if n == 0 else -1
        self.codes = np.ascontiguousarray(np.asarray(self.codes, dtype=np.int64).reshape(rows, n))
        A, B = self.support
        self.support = (float(A), float(B))
        if not A < B:
            raise IngestionError("support must satisfy A < B")
        if len(self.levels) != self.codes.shape[0]:
            raise IngestionError("one level count per covariate row is required")
        if any(v < 1 for v in self.levels):
            raise IngestionError("level counts must be positive")
        bad = ~np.isfinite(self.x)
        if bad.any():
            cols = sorted(set(np.nonzero(bad)[1].tolist()))
            raise IngestionError(f"non-finite responses in units {cols[:20]}")
        if n and (self.x.min() < A or self.x.max() > B):
            raise IngestionError("responses fall outside the support")
        for h, d_h in enumerate(self.levels):
            if n and (self.codes[h].min() < 0 or self.codes[h].max() >= d_h):
                raise IngestionError(f"covariate {h} has codes outside 0..{d_h - 1}")

    @property
    def d(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return len(self.levels)


@dataclass
class Hyperparameters:
    K: int = 10
    K_star: int = 20
    support: tuple = (0.0, 10.0)
    a_alpha: float = 2.0
    b_alpha: float = 0.5
    a_phi: float = 2.0
    b_phi: float = 0.5
    alpha0: float = 1.0
    phi_star: float = 1.0
    a_sigma: float = 2.0
    b_sigma: float = 0.5
    m0: float | None = None
    s0: float | None = None
    var_mu: float = 0.5
    var_sigma: float = 0.5
    var_alpha: float = 0.5
    var_phi: float = 0.5
    M_b: int = 101
    M_theta: int = 101
    iterations: int = 30000
    burn_in: int = 20000
    thin: int = 5
    seed: int = 0
    adapt_every: int = 50
    update_copula: bool = True
    copula_scores: str = "marginal"

    def validate(self, levels=None):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.K_star < 1:
            raise ValueError("K_star must be >= 1")
        if levels is not None and self.K_star > int(np.prod(levels)):
            raise ValueError("K_star cannot exceed the number of covariate combinations")
        if not self.support[0] < self.support[1]:
            raise ValueError("support must satisfy A < B")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn-in must be in [0, iterations)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        for name in ("a_alpha", "b_alpha", "a_phi", "b_phi", "alpha0", "phi_star", "a_sigma",
                     "b_sigma", "var_mu", "var_sigma", "var_alpha", "var_phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.M_b < 3 or self.M_theta < 3:
            raise ValueError("grid sizes must be >= 3")
        if self.copula_scores not in ("marginal", "component"):
            raise ValueError("copula_scores must be 'marginal' or 'component'")
        return self

    def resolved(self, data: Dataset) -> "Hyperparameters":
        """Copy with the atom-location prior filled in from the data when unset."""
        hp = Hyperparameters(**asdict(self))
        hp.support = tuple(float(v) for v in hp.support)
        A, B = hp.support
        flat = data.x.reshape(-1)
        if hp.m0 is None:
            hp.m0 = float(flat.mean()) if flat.size else 0.5 * (A + B)
        if hp.s0 is None:
            sd = float(flat.std()) if flat.size > 1 else 0.0
            hp.s0 = sd if sd > 0 else (B - A) / 4.0
        return hp

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        d = dict(d)
        if "support" in d:
            d["support"] = tuple(d["support"])
        return cls(**d)

    def n_retained(self) -> int:
        return len(range(self.burn_in + self.thin, self.iterations + 1, self.thin))


@dataclass
class ChainState:
    z: np.ndarray
    parts: list
    lambda0: np.ndarray
    alpha: float
    phi: float
    atoms: mixture.Atoms
    cop: CopulaParams
    adapt: mixture.AdaptState
    iteration: int = 0

    def check(self):
        """Composed invariant check over every module's state."""
        for l, part in enumerate(self.parts):
            part.check_consistency(self.z[l])
        assert np.allclose(self.lambda0.sum(axis=1), 1.0) and np.all(self.lambda0 >= 0)
        assert self.alpha > 0 and self.phi > 0
        assert np.all(self.atoms.sigma2 > 0)


def make_streams(seed: int, d: int) -> dict:
    def gen(tag, l=0):
        return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag, l)))
    s = {tag: [gen(tag, l) for l in range(d)]
         for tag in (STREAM_Z, STREAM_LAMBDA0, STREAM_PARTITION, STREAM_SSTAR)}
    for tag in (STREAM_CONC, STREAM_ATOMS, STREAM_COPULA):
        s[tag] = gen(tag)
    return s


def init_state(data: Dataset, hp: Hyperparameters) -> ChainState:
    A, B = hp.support
    z = mixture.initial_z(data.x, hp.K) if data.n else np.zeros((data.d, 0), np.int64)
    z = np.ascontiguousarray(z, dtype=np.int64)
    parts = [CoordinatePartition(data.levels, hp.K, hp.K_star, data.codes, z[l]) for l in range(data.d)]
    return ChainState(
        z=z, parts=parts,
        lambda0=np.full((data.d, hp.K), 1.0 / hp.K),
        alpha=1.0, phi=1.0,
        atoms=mixture.initial_atoms(hp.K, A, B, hp.b_sigma),
        cop=CopulaParams(data.d, hp.M_b, hp.M_theta),
        adapt=mixture.AdaptState(var_alpha=hp.var_alpha, var_phi=hp.var_phi, every=hp.adapt_every),
    )


def rao_blackwell_lambda(part: CoordinatePartition, lambda0: np.ndarray, alpha: float) -> np.ndarray:
    """Conditional means of the K_star weight vectors of one coordinate."""
    w = alpha * lambda0[None, :] + part.n_star
    return w / w.sum(axis=1, keepdims=True)


def rao_blackwell_eta(part: CoordinatePartition, phi: float) -> list:
    out = []
    for s_h in part.s:
        d_h = len(s_h)
        w = phi / d_h + np.bincount(s_h, minlength=d_h)
        out.append(w / w.sum())
    return out


def rao_blackwell_eta_star(part: CoordinatePartition, phi_star: float) -> np.ndarray:
    w = phi_star / part.K_star + part.m_star
    return w / w.sum()


@dataclass
class Draw:
    iteration: int
    s: list            # per coordinate: list of first-layer label arrays
    s_star: list       # per coordinate: second-layer tensor
    lambda_hat: np.ndarray   # d x K_star x K
    eta_hat: list
    eta_star_hat: np.ndarray  # d x K_star
    lambda0: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    alpha: float
    phi: float
    b_idx: np.ndarray
    theta_idx: np.ndarray
    b: np.ndarray
    theta: np.ndarray
    R: np.ndarray


def snapshot(state: ChainState, hp: Hyperparameters) -> Draw:
    parts = state.parts
    return Draw(
        iteration=state.iteration,
        s=[[s_h.copy() for s_h in part.s] for part in parts],
        s_star=[part.s_star.copy() for part in parts],
        lambda_hat=np.stack([rao_blackwell_lambda(part, state.lambda0[l], state.alpha)
                             for l, part in enumerate(parts)]),
        eta_hat=[rao_blackwell_eta(part, state.phi) for part in parts],
        eta_star_hat=np.stack([rao_blackwell_eta_star(part, hp.phi_star) for part in parts]),
        lambda0=state.lambda0.copy(),
        mu=state.atoms.mu.copy(), sigma2=state.atoms.sigma2.copy(),
        alpha=float(state.alpha), phi=float(state.phi),
        b_idx=state.cop.b_idx.copy(), theta_idx=state.cop.theta_idx.copy(),
        b=state.cop.b, theta=state.cop.theta,
        R=build_V(state.cop).R,
    )


def combination_groups(s_list, s_star) -> np.ndarray:
    """Second-layer group of every covariate combination (C order over levels)."""
    grids = np.meshgrid(*s_list, indexing="ij")
    return np.asarray(s_star)[tuple(grids)].reshape(-1)


class PosteriorDraws:
    """Retained draws with stacked arrays for the scalar and vector summaries."""

    def __init__(self, draws: list, levels, support, K: int, K_star: int, meta: dict | None = None):
        self.draws = draws
        self.levels = tuple(levels)
        self.support = tuple(support)
        self.K, self.K_star = K, K_star
        self.meta = meta or {}
        self.d = len(draws[0].s) if draws else 0

    def __len__(self):
        return len(self.draws)

    def _stack(self, name):
        return np.stack([getattr(dr, name) for dr in self.draws])

    @property
    def mu(self):
        return self._stack("mu")

    @property
    def sigma2(self):
        return self._stack("sigma2")

    @property
    def alpha(self):
        return np.array([dr.alpha for dr in self.draws])

    @property
    def phi(self):
        return np.array([dr.phi for dr in self.draws])

    @property
    def lambda_hat(self):
        return self._stack("lambda_hat")

    @property
    def R(self):
        return self._stack("R")

    def combo_groups(self, l: int) -> np.ndarray:
        """(n_draws, prod levels) second-layer group per combination for coordinate ``l``."""
        return np.stack([combination_groups(dr.s[l], dr.s_star[l]) for dr in self.draws])

    def cluster_counts(self) -> np.ndarray:
        """(n_draws, d, p) number of first-layer clusters."""
        return np.array([[[int(s_h.max()) + 1 for s_h in s_l] for s_l in dr.s] for dr in self.draws])

    # chain store -----------------------------------------------------------

    def header(self) -> dict:
        return {"type": "header", "schema": STORE_SCHEMA, "levels": list(self.levels),
                "support": list(self.support), "K": self.K, "K_star": self.K_star,
                "d": self.d, "meta": self.meta}

    def to_ndjson(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for dr in self.draws:
                fh.write(json.dumps(draw_record(dr)) + "\n")

    @classmethod
    def from_ndjson(cls, path) -> "PosteriorDraws":
        with open(path) as fh:
            head = json.loads(fh.readline())
            if head.get("schema") != STORE_SCHEMA:
                raise ValueError(f"{path}: unsupported chain store schema {head.get('schema')!r}")
            draws = [record_draw(json.loads(line)) for line in fh if line.strip()]
        return cls(draws, head["levels"], head["support"], head["K"], head["K_star"], head.get("meta"))

    def to_npz(self, path):
        """Compact binary variant holding the fixed-shape summaries only."""
        np.savez_compressed(path, mu=self.mu, sigma2=self.sigma2, alpha=self.alpha, phi=self.phi,
                            lambda_hat=self.lambda_hat, R=self.R,
                            b_idx=self._stack("b_idx"), theta_idx=self._stack("theta_idx"),
                            eta_star_hat=self._stack("eta_star_hat"),
                            iteration=np.array([dr.iteration for dr in self.draws]))


def draw_record(dr: Draw) -> dict:
    return {
        "type": "draw", "iteration": dr.iteration,
        "s": [[s_h.tolist() for s_h in s_l] for s_l in dr.s],
        "s_star": [t.tolist() for t in dr.s_star],
        "lambda_hat": dr.lambda_hat.tolist(),
        "eta_hat": [[e.tolist() for e in e_l] for e_l in dr.eta_hat],
        "eta_star_hat": dr.eta_star_hat.tolist(),
        "lambda0": dr.lambda0.tolist(),
        "mu": dr.mu.tolist(), "sigma2": dr.sigma2.tolist(),
        "alpha": dr.alpha, "phi": dr.phi,
        "b_idx": dr.b_idx.tolist(), "theta_idx": dr.theta_idx.tolist(),
        "b": dr.b.tolist(), "theta": dr.theta.tolist(), "R": dr.R.tolist(),
    }


def record_draw(rec: dict) -> Draw:
    arr = np.asarray
    return Draw(
        iteration=rec["iteration"],
        s=[[arr(s_h, dtype=np.int64) for s_h in s_l] for s_l in rec["s"]],
        s_star=[arr(t, dtype=np.int64) for t in rec["s_star"]],
        lambda_hat=arr(rec["lambda_hat"], dtype=float),
        eta_hat=[[arr(e, dtype=float) for e in e_l] for e_l in rec["eta_hat"]],
        eta_star_hat=arr(rec["eta_star_hat"], dtype=float),
        lambda0=arr(rec["lambda0"], dtype=float),
        mu=arr(rec["mu"], dtype=float), sigma2=arr(rec["sigma2"], dtype=float),
        alpha=float(rec["alpha"]), phi=float(rec["phi"]),
        b_idx=arr(rec["b_idx"], dtype=np.int64), theta_idx=arr(rec["theta_idx"], dtype=np.int64),
        b=arr(rec["b"], dtype=float).reshape(-1), theta=arr(rec["theta"], dtype=float).reshape(-1),
        R=arr(rec["R"], dtype=float),
    )


@dataclass
class RunStats:
    """Acceptance counters split at the end of burn-in."""

    post_alpha: int = 0
    post_phi: int = 0
    post_iters: int = 0
    accepted: dict = field(default_factory=dict)
    proposed: dict = field(default_factory=dict)

    def rates(self) -> dict:
        out = {k: self.accepted[k] / self.proposed[k] for k in self.proposed if self.proposed[k]}
        if self.post_iters:
            out["alpha_post_burnin"] = self.post_alpha / self.post_iters
            out["phi_post_burnin"] = self.post_phi / self.post_iters
        return out


def _thread_count(parallel) -> int:
    if parallel is None:
        parallel = int(os.environ.get("FLOWER_THREADS", "1"))
    return max(1, int(parallel))


class Sampler:
    """One chain: holds state and streams so the iteration can be stepped or run."""

    def __init__(self, data: Dataset, hp: Hyperparameters, *, threads=None, state: ChainState | None = None):
        hp.validate(data.levels)
        if tuple(hp.support) != tuple(data.support):
            raise ValueError("hyperparameter support differs from the dataset support")
        self.data = data
        self.hp = hp.resolved(data)
        self.state = state if state is not None else init_state(data, self.hp)
        self.streams = make_streams(self.hp.seed, data.d)
        self.threads = _thread_count(threads)
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 and data.d > 1 else None
        self.stats = RunStats()
        # tests switch blocks off to probe subsets of the kernel
        self.fixed = set()

    def _per_coord(self, fn):
        d = self.data.d
        if self.pool is None:
            for l in range(d):
                fn(l)
        else:
            list(self.pool.map(fn, range(d)))

    def _count(self, key, acc, prop=1):
        self.stats.accepted[key] = self.stats.accepted.get(key, 0) + int(acc)
        self.stats.proposed[key] = self.stats.proposed.get(key, 0) + prop

    def step(self):
        """One full iteration in the fixed block order."""
        st, hp, data = self.state, self.hp, self.data
        A, B = hp.support
        S = self.streams
        st.iteration += 1
        b = st.iteration
        fixed = self.fixed

        if "z" not in fixed and data.n:
            def z_step(l):
                mixture.update_z(st.parts[l], st.z[l], data.x[l], st.atoms,
                                 st.alpha * st.lambda0[l], A, B, S[STREAM_Z][l])
            self._per_coord(z_step)

        if "lambda0" not in fixed:
            def lam_step(l):
                st.lambda0[l] = mixture.update_lambda0(st.parts[l], st.lambda0[l], st.alpha,
                                                       hp.alpha0, S[STREAM_LAMBDA0][l])
            self._per_coord(lam_step)

        rng = S[STREAM_CONC]
        burning = b <= hp.burn_in
        if "alpha" not in fixed:
            n_stars = [part.n_star for part in st.parts]
            st.alpha, acc_a = mixture.mh_log_scale(
                st.alpha, lambda a: mixture.log_p_alpha(a, n_stars, st.lambda0, hp.a_alpha, hp.b_alpha),
                st.adapt.var_alpha, rng)
            st.adapt.window_alpha += acc_a
            self._count("alpha", acc_a)
            if not burning:
                self.stats.post_alpha += acc_a
        if "phi" not in fixed:
            s_lists = [part.s for part in st.parts]
            st.phi, acc_p = mixture.mh_log_scale(
                st.phi, lambda f: mixture.log_p_phi(f, s_lists, hp.a_phi, hp.b_phi),
                st.adapt.var_phi, rng)
            st.adapt.window_phi += acc_p
            self._count("phi", acc_p)
            if not burning:
                self.stats.post_phi += acc_p
        if not burning:
            self.stats.post_iters += 1

        if "atoms" not in fixed:
            stats = mixture.atom_stats(data.x, st.z, hp.K)
            for k in range(hp.K):
                acc_mu, acc_s2 = mixture.update_atoms(k, st.atoms, stats, hp, S[STREAM_ATOMS])
                self._count("mu", acc_mu)
                self._count("sigma2", acc_s2)

        if "partition" not in fixed:
            def part_step(l):
                part = st.parts[l]
                a = st.alpha * st.lambda0[l]
                for h in range(data.p):
                    part.joint_update_s(h, st.z[l], a, st.alpha, st.phi, hp.phi_star,
                                        S[STREAM_PARTITION][l])
            self._per_coord(part_step)

        if "s_star" not in fixed:
            def star_step(l):
                st.parts[l].gibbs_s_star(st.alpha * st.lambda0[l], st.alpha, hp.phi_star,
                                         S[STREAM_SSTAR][l])
            self._per_coord(star_step)

        if hp.update_copula and "copula" not in fixed and data.d > 1:
            y = self.latent_scores()
            copula.update_b(st.cop, y, S[STREAM_COPULA])
            copula.update_theta(st.cop, y, S[STREAM_COPULA])

        if burning:
            mixture.adapt_proposals(st.adapt, b)

    def latent_scores(self) -> np.ndarray:
        """Normal scores fed to the copula block.

        ``component`` pushes each x through its allocated kernel's CDF;
        ``marginal`` uses the unit's whole conditional mixture CDF with the
        current conditional-mean weights.
        """
        st, hp, data = self.state, self.hp, self.data
        A, B = hp.support
        if hp.copula_scores == "component":
            return copula.latent_y(data.x, st.z, st.atoms.mu, st.atoms.sigma2, A, B)
        w = np.stack([rao_blackwell_lambda(part, st.lambda0[l], st.alpha)[part.group]
                      for l, part in enumerate(st.parts)])
        return copula.marginal_latent_y(data.x, w, st.atoms.mu, st.atoms.sigma2, A, B)

    def acceptance_rates(self) -> dict:
        rates = self.stats.rates()
        parts = self.state.parts
        prop = sum(p.proposed_s for p in parts)
        if prop:
            rates["partition"] = sum(p.accepted_s for p in parts) / prop
        cop = self.state.cop
        if cop.proposed_b:
            rates["b"] = cop.accepted_b / cop.proposed_b
        if cop.proposed_theta:
            rates["theta"] = cop.accepted_theta / cop.proposed_theta
        return rates

    def run(self, callback=None, progress_every: int = 0, store_path=None) -> PosteriorDraws:
        hp = self.hp
        draws = []
        fh = None
        if store_path is not None:
            fh = open(store_path, "w")
        try:
            header_written = False
            while self.state.iteration < hp.iterations:
                self.step()
                it = self.state.iteration
                if callback is not None:
                    callback(self, it)
                if it > hp.burn_in and (it - hp.burn_in) % hp.thin == 0:
                    dr = snapshot(self.state, hp)
                    draws.append(dr)
                    if fh is not None:
                        if not header_written:
                            fh.write(json.dumps(self._draws([]).header()) + "\n")
                            header_written = True
                        fh.write(json.dumps(draw_record(dr)) + "\n")
                if progress_every and it % progress_every == 0:
                    rates = " ".join(f"{k}={v:.3f}" for k, v in sorted(self.acceptance_rates().items()))
                    log.info("iter %d %s", it, rates)
        finally:
            if fh is not None:
                fh.close()
            if self.pool is not None:
                self.pool.shutdown()
                self.pool = None
        return self._draws(draws)

    def _draws(self, draws) -> PosteriorDraws:
        hp = self.hp
        meta = {"hyperparameters": asdict(hp), "acceptance": self.acceptance_rates(),
                "adapt_history": list(self.state.adapt.history)[-5:]}
        pd = PosteriorDraws(draws, self.data.levels, hp.support, hp.K, hp.K_star, meta)
        pd.d = self.data.d
        return pd


def run_chain(data: Dataset, hp: Hyperparameters, *, callback=None, threads=None,
              progress_every: int = 0, store_path=None) -> PosteriorDraws:
    """Run one chain and return its retained, Rao-Blackwellized draws."""
    return Sampler(data, hp, threads=threads).run(callback, progress_every, store_path)
