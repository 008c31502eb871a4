"""Command-line front end: ``flower fit | estimate | simulate | score | summary``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import estimators as est
from . import simgen
from .sampler import Dataset, Hyperparameters, IngestionError, PosteriorDraws, Sampler

CONFIG_SCHEMA_VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4, 5

log = logging.getLogger("flower")


class ConfigError(ValueError):
    pass


# ingestion -------------------------------------------------------------------

@dataclass
class IngestInfo:
    """Everything needed to map model-scale results back to the input file."""

    response: list
    covariate: list
    level_names: list  # per covariate: original code strings, index = internal code
    lo: list
    hi: list
    support: list
    rescaled: bool = True

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "IngestInfo":
        return cls(**obj)

    def scale(self, l: int) -> float:
        A, B = self.support
        return (B - A) / (self.hi[l] - self.lo[l]) if self.rescaled else 1.0

    def to_model(self, l: int, v):
        A = self.support[0]
        return A + (np.asarray(v, float) - self.lo[l]) * self.scale(l) if self.rescaled else np.asarray(v, float)

    def to_original(self, l: int, v):
        A = self.support[0]
        return self.lo[l] + (np.asarray(v, float) - A) / self.scale(l) if self.rescaled else np.asarray(v, float)


def _sort_levels(values):
    try:
        return sorted(values, key=lambda v: float(v))
    except ValueError:
        return sorted(values)


def ingest(path, response, covariate, support=(0.0, 10.0), rescale: bool = True,
           level_names=None):
    """Read a CSV into a Dataset on the common support; returns (Dataset, IngestInfo)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in list(response) + list(covariate) if c not in header]
        if missing:
            raise IngestionError(f"columns not found in {path}: {missing}")
        rows = list(reader)
    n = len(rows)
    A, B = float(support[0]), float(support[1])
    x = np.empty((len(response), n))
    bad = []
    for j, r in enumerate(rows):
        for l, col in enumerate(response):
            raw = (r[col] or "").strip()
            try:
                v = float(raw)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                bad.append(j + 2)  # 1-based file line, header is line 1
            x[l, j] = v
    if bad:
        raise IngestionError(f"missing or non-numeric responses on lines {sorted(set(bad))[:50]}")
    lo, hi = [], []
    for l, col in enumerate(response):
        mn, mx = (float(x[l].min()), float(x[l].max())) if n else (A, B)
        if rescale:
            if mx == mn:
                raise IngestionError(f"response column {col!r} is constant")
            x[l] = A + (B - A) * (x[l] - mn) / (mx - mn)
            x[l] = np.clip(x[l], A, B)
        lo.append(mn)
        hi.append(mx)
    codes = np.empty((len(covariate), n), dtype=np.int64)
    names = []
    for h, col in enumerate(covariate):
        vals = [(r[col] or "").strip() for r in rows]
        table = list(level_names[h]) if level_names else _sort_levels(set(vals))
        index = {v: q for q, v in enumerate(table)}
        unknown = sorted(set(vals) - set(index))
        if unknown:
            raise IngestionError(f"covariate {col!r} has unknown levels {unknown[:10]}")
        codes[h] = [index[v] for v in vals]
        names.append(table)
    data = Dataset(x, codes, tuple(len(t) for t in names), (A, B))
    info = IngestInfo(list(response), list(covariate), names, lo, hi, [A, B], bool(rescale))
    return data, info


def export_csv(path, data: Dataset, info: IngestInfo):
    """Write a dataset in the ingest format, responses back in original units."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(info.response) + list(info.covariate))
        orig = [info.to_original(l, data.x[l]) for l in range(data.d)]
        for i in range(data.n):
            w.writerow([repr(float(orig[l][i])) for l in range(data.d)]
                       + [info.level_names[h][data.codes[h, i]] for h in range(data.p)])


# configuration -----------------------------------------------------------------

CONFIG_TABLES = {
    "data": {"path", "response", "covariate", "support", "rescale"},
    "hyperparameters": {f.name for f in fields(Hyperparameters)},
    "output": {"dir", "npz", "progress_every"},
}


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    version = cfg.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}")
    unknown = set(cfg) - set(CONFIG_TABLES)
    if unknown:
        raise ConfigError(f"unknown config tables: {sorted(unknown)}")
    for table, keys in CONFIG_TABLES.items():
        sub = cfg.setdefault(table, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"[{table}] must be a table")
        bad = set(sub) - keys
        if bad:
            raise ConfigError(f"unknown keys in [{table}]: {sorted(bad)}")
    return cfg


def _csv_list(s):
    return [v.strip() for v in s.split(",") if v.strip()] if s else []


def _support(s):
    parts = [float(v) for v in s.split(",")] if isinstance(s, str) else [float(v) for v in s]
    if len(parts) != 2:
        raise ConfigError("support needs two numbers A,B")
    return tuple(parts)


# commands ------------------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg = load_config(args.config) if args.config else {t: {} for t in CONFIG_TABLES}
    dcfg, hcfg, ocfg = cfg["data"], dict(cfg["hyperparameters"]), cfg["output"]
    path = args.data or dcfg.get("path")
    if not path:
        raise ConfigError("no input CSV given (--data or [data].path)")
    if args.config and not os.path.isabs(path) and not args.data:
        path = str(Path(args.config).parent / path)
    response = _csv_list(args.response) or list(dcfg.get("response", []))
    covariate = _csv_list(args.covariate) or list(dcfg.get("covariate", []))
    if not response:
        raise ConfigError("no response columns given")
    support = _support(args.support or dcfg.get("support", (0.0, 10.0)))
    rescale = dcfg.get("rescale", True) and not args.no_rescale
    out = Path(args.out or ocfg.get("dir") or "flower_run")
    for key in ("iterations", "burn_in", "thin", "K", "K_star"):
        v = getattr(args, key)
        if v is not None:
            hcfg[key] = v
    hcfg["seed"] = args.seed
    hcfg["support"] = support
    try:
        hp = Hyperparameters.from_dict(hcfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    data, info = ingest(path, response, covariate, support, rescale)
    try:
        hp.validate(data.levels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ingest.json", "w") as fh:
        json.dump(info.to_json(), fh, indent=2)
    sampler = Sampler(data, hp, threads=args.threads)
    progress = args.progress_every if args.progress_every is not None else ocfg.get("progress_every", 0)
    draws = sampler.run(progress_every=progress, store_path=out / "draws.ndjson")
    if ocfg.get("npz") or args.npz:
        draws.to_npz(out / "draws.npz")
    summary = {"n_draws": len(draws), "acceptance": sampler.acceptance_rates(),
               "hyperparameters": asdict(sampler.hp)}
    with open(out / "fit.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps({"run": str(out), "n_draws": len(draws)}))
    return EXIT_OK


def _load_run(run) -> tuple[PosteriorDraws, IngestInfo | None]:
    run = Path(run)
    draws = PosteriorDraws.from_ndjson(run / "draws.ndjson")
    info = None
    if (run / "ingest.json").exists():
        with open(run / "ingest.json") as fh:
            info = IngestInfo.from_json(json.load(fh))
    return draws, info


_COMBO_SPLIT = re.compile(r",(?=[^,=\[\(]+=)")


def parse_combo(spec: str, info: IngestInfo | None, levels) -> tuple:
    """``name=level,...`` (or positional ``level,...``) to internal 0-based codes."""
    names = info.covariate if info else [f"c{h + 1}" for h in range(len(levels))]
    tables = info.level_names if info else [[str(q + 1) for q in range(d_h)] for d_h in levels]
    combo = [None] * len(levels)
    if "=" in spec:
        for part in _COMBO_SPLIT.split(spec):
            key, _, val = part.partition("=")
            key, val = key.strip(), val.strip()
            if key not in names:
                raise IngestionError(f"unknown covariate {key!r} in combination")
            h = names.index(key)
            if val not in tables[h]:
                raise IngestionError(f"unknown level {val!r} for covariate {key!r}")
            combo[h] = tables[h].index(val)
    else:
        vals = _csv_list(spec)
        if len(vals) != len(levels):
            raise IngestionError(f"combination needs {len(levels)} levels")
        for h, val in enumerate(vals):
            if val not in tables[h]:
                raise IngestionError(f"unknown level {val!r} for covariate {names[h]!r}")
            combo[h] = tables[h].index(val)
    if any(c is None for c in combo):
        missing = [names[h] for h, c in enumerate(combo) if c is None]
        raise IngestionError(f"combination does not fix covariates {missing}")
    return tuple(combo)


def _combo_tag(combo, info: IngestInfo | None) -> str:
    tables = info.level_names if info else None
    parts = []
    for h, c in enumerate(combo):
        lab = tables[h][c] if tables else str(c + 1)
        parts.append(re.sub(r"[^A-Za-z0-9.+-]+", "-", lab).strip("-") or str(c + 1))
    return "_".join(parts)


def _coordinate(spec: str, info: IngestInfo | None, d: int) -> int:
    spec = spec.split("=", 1)[1] if "=" in spec else spec
    if info and spec in info.response:
        return info.response.index(spec)
    try:
        l = int(spec) - 1
    except ValueError:
        raise IngestionError(f"unknown response {spec!r}") from None
    if not 0 <= l < d:
        raise IngestionError(f"coordinate must be in 1..{d}")
    return l


def cmd_estimate(args) -> int:
    draws, info = _load_run(args.run)
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    grid = est.make_grid(draws.support, args.grid)
    A, B = draws.support
    d = draws.d
    parts = est.map_partitions(draws)
    names = info.covariate if info else None
    est.write_partitions(out / "partitions.json", parts, names, info.level_names if info else None)
    est.write_matrix_csv(out / "R.csv", est.correlation_estimate(draws).R)
    written = ["partitions.json", "R.csv"]

    def original(l):
        # identity map when the run was fitted on the model scale
        return (info.lo[l], info.hi[l], A, B) if info and info.rescaled else (A, B, A, B)

    coords = [_coordinate(args.marginal, info, d)] if args.marginal else list(range(d))
    combos = [parse_combo(c, info, draws.levels) for c in args.combo]
    if args.all_combos:
        combos = [tuple(int(v) for v in c) for c in np.ndindex(*draws.levels)]
    for l in coords:
        if combos:
            cond = est.cond_marginal_all(l, draws, grid)
            for combo in combos:
                e = est.DensityEstimate(grid, cond[est.combo_index(draws.levels, combo)], (l,), combo)
                name = f"density_{l + 1}_{_combo_tag(combo, info)}.csv"
                e.to_csv(out / name, original(l))
                written.append(name)
        if not combos or args.unconditional:
            codes = _load_codes(args, info, draws)
            if codes is not None:
                e = est.uncond_density(l, draws, codes, grid)
                name = f"density_{l + 1}_all.csv"
                e.to_csv(out / name, original(l))
                written.append(name)
    if args.joint:
        L = [_coordinate(v, info, d) for v in _csv_list(args.joint)]
        if len(combos) != 1:
            raise IngestionError("--joint needs exactly one --combo")
        jgrid = est.make_grid(draws.support, args.joint_grid)
        e = est.cond_joint_density(L, combos[0], draws, jgrid)
        name = "joint_" + "_".join(str(l + 1) for l in L) + f"_{_combo_tag(combos[0], info)}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{l + 1}" for l in L] + ["value"])
            for idx in np.ndindex(*e.values.shape):
                w.writerow([repr(float(jgrid[i])) for i in idx] + [repr(float(e.values[idx]))])
        written.append(name)
    print(json.dumps({"written": written}))
    return EXIT_OK


def _load_codes(args, info, draws):
    """Covariate codes of a CSV, mapped through the run's code tables."""
    if not args.data:
        return None
    if info is None:
        raise IngestionError("unconditional densities need the run's ingest.json")
    with open(args.data, newline="") as fh:
        rows = list(csv.DictReader(fh))
    codes = np.empty((len(info.covariate), len(rows)), dtype=np.int64)
    for h, col in enumerate(info.covariate):
        index = {v: q for q, v in enumerate(info.level_names[h])}
        try:
            codes[h] = [index[(r[col] or "").strip()] for r in rows]
        except KeyError as exc:
            raise IngestionError(f"covariate {col!r}: unknown level {exc.args[0]!r}") from None
    return codes


def _write_dataset(path, data: Dataset, level_names=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"y{l + 1}" for l in range(data.d)] + [f"c{h + 1}" for h in range(data.p)])
        for i in range(data.n):
            labs = [level_names[h][data.codes[h, i]] if level_names else str(data.codes[h, i] + 1)
                    for h in range(data.p)]
            w.writerow([repr(float(v)) for v in data.x[:, i]] + labs)


def _read_covariates(path, levels=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    codes = np.array([[int(v) - 1 for v in r] for r in rows], dtype=np.int64).T.reshape(len(header), -1)
    if levels is not None and codes.size and (codes.min() < 0 or np.any(codes.max(axis=1) >= np.asarray(levels))):
        raise IngestionError("covariate codes must be 1-based and within the artifact's level counts")
    return codes


def _write_covariates(path, codes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"c{h + 1}" for h in range(codes.shape[0])])
        for row in codes.T:
            w.writerow([int(v) + 1 for v in row])


def cmd_simulate(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.scenario == "1":
        model, data = simgen.scenario1(args.n or 1000, rng)
    elif args.scenario == "survey-artifact":
        model = simgen.survey_artifact()
        codes = simgen.survey_covariates(args.n or simgen.SCENARIO2_N, rng)
        _write_covariates(out / "covariates.csv", codes)
        model.save(out / "truth.json")
        print(json.dumps({"written": ["covariates.csv", "truth.json"]}))
        return EXIT_OK
    else:
        if not args.artifact:
            raise FileNotFoundError("--artifact is required for this scenario")
        if not Path(args.artifact).exists():
            raise FileNotFoundError(f"artifact {args.artifact} not found")
        model = simgen.TrueModel.from_json(args.artifact)
        if args.covariates:
            codes = _read_covariates(args.covariates, model.levels)
            if args.n:
                codes = codes[:, :args.n]
        elif args.scenario == "2":
            raise FileNotFoundError("scenario 2 needs --covariates")
        else:
            codes = simgen.uniform_covariates(model.levels, args.n or 1000, rng)
        R = None if args.scenario == "2" else model.R
        if args.independent:
            R = np.eye(model.d)
        data = simgen.scenario2(model, codes, rng, R=R)
        model = simgen.TrueModel(data_R(R, model), model.mu, model.sigma2, model.s, model.s_star,
                                 model.weights, model.levels, model.support)
    if args.independent and args.scenario == "1":
        model = simgen.TrueModel(np.eye(model.d), model.mu, model.sigma2, model.s, model.s_star,
                                 model.weights, model.levels, model.support)
        data = simgen.sample_dataset(model, data.codes, rng)
    _write_dataset(out / "data.csv", data)
    model.save(out / "truth.json")
    written += ["data.csv", "truth.json"]
    print(json.dumps({"written": written, "n": data.n, "d": data.d}))
    return EXIT_OK


def data_R(R, model):
    if R is None:
        return simgen.SCENARIO2_R[:model.d, :model.d]
    return R


def cmd_score(args) -> int:
    truth = simgen.TrueModel.from_json(args.truth)
    if args.run:
        draws, info = _load_run(args.run)
    else:
        draws, info = truth.as_draws(), None
    if tuple(draws.levels) != tuple(truth.levels):
        raise IngestionError("run and truth have different covariate levels")
    if info is not None and info.rescaled:
        res = _score_rescaled(truth, draws, info, args.grid)
    else:
        res = est.score_against_truth(truth, draws, args.grid)
    out = Path(args.out) if args.out else (Path(args.run) if args.run else Path("."))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "score.json", "w") as fh:
        json.dump(res, fh, indent=2)
    print(json.dumps({"ise_mean": res["ise_mean"], "ari_mean": res["ari_mean"]}))
    return EXIT_OK


def _score_rescaled(truth, draws, info: IngestInfo, G: int) -> dict:
    """Compare on the truth's grid by pulling the estimate back through the affine map."""
    grid = est.make_grid(truth.support, G)
    delta = grid[1] - grid[0]
    A, B = draws.support
    parts = est.map_partitions(draws)
    ises, aris = [], []
    for l in range(truth.d):
        pts = info.to_model(l, grid)
        inside = (pts >= A) & (pts <= B)
        vals = np.zeros((int(np.prod(draws.levels)), G))
        vals[:, inside] = est.cond_marginal_all(l, draws, pts[inside]) * info.scale(l)
        diff = truth.cond_density_all(l, grid) - vals
        ises.append((diff * diff).sum(axis=1) * delta)
        aris.append(est.ari(truth.combination_partition(l), parts.combination_partition(l)))
    ises = np.array(ises)
    return {"ise_mean": float(ises.mean()), "ise_sum": float(ises.sum()),
            "ise_per_coordinate": ises.mean(axis=1).tolist(), "ari_mean": float(np.mean(aris)),
            "ari_per_coordinate": [float(a) for a in aris],
            "map_frequency": [float(f) for f in parts.frequency]}


def _final_acceptance(run, draws):
    # the store header is written with the first retained draw; fit.json has end-of-run rates
    path = Path(run) / "fit.json"
    if path.exists():
        with open(path) as fh:
            return json.load(fh).get("acceptance", {})
    return (draws.meta or {}).get("acceptance", {})


def cmd_summary(args) -> int:
    draws, info = _load_run(args.run)
    counts = draws.cluster_counts()
    volumes = counts.prod(axis=2)
    res = {
        "n_draws": len(draws),
        "acceptance": _final_acceptance(args.run, draws),
        "alpha_mean": float(draws.alpha.mean()),
        "phi_mean": float(draws.phi.mean()),
        "first_layer_clusters_mean": counts.mean(axis=0).tolist(),
        "tensor_volume_mean": volumes.mean(axis=0).tolist(),
    }
    if args.traces:
        res["first_layer_clusters_trace"] = counts.tolist()
    print(json.dumps(res, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flower", description="Multivariate density regression with categorical covariates.")
    p.add_argument("--error-json", action="store_true", help="report failures as JSON on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--error-json", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="run the sampler and store draws")
    f.add_argument("--config")
    f.add_argument("--data")
    f.add_argument("--response", help="comma-separated response columns")
    f.add_argument("--covariate", help="comma-separated covariate columns")
    f.add_argument("--support", help="A,B")
    f.add_argument("--no-rescale", action="store_true", help="responses already lie on [A,B]")
    f.add_argument("--out")
    f.add_argument("--seed", type=int, required=True)
    f.add_argument("--iterations", type=int)
    f.add_argument("--burn-in", dest="burn_in", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--K", type=int)
    f.add_argument("--K-star", dest="K_star", type=int)
    f.add_argument("--threads", type=int, help="default: FLOWER_THREADS or 1")
    f.add_argument("--npz", action="store_true")
    f.add_argument("--progress-every", type=int)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("estimate", parents=[common], help="densities, partitions and R from a run")
    e.add_argument("--run", required=True, help="run directory written by fit")
    e.add_argument("--out", help="output directory (default: the run directory)")
    e.add_argument("--marginal", help="coordinate (1-based index or column name)")
    e.add_argument("--combo", action="append", default=[], help="name=level,... (repeatable)")
    e.add_argument("--all-combos", action="store_true", help="one density per covariate combination")
    e.add_argument("--unconditional", action="store_true", help="also write the covariate-averaged density")
    e.add_argument("--data", help="CSV providing covariate frequencies for unconditional densities")
    e.add_argument("--joint", help="comma-separated coordinates for a joint density")
    e.add_argument("--grid", type=int, default=300, help="grid points per marginal")
    e.add_argument("--joint-grid", type=int, default=100, help="grid points per axis of a joint")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", parents=[common], help="generate synthetic data")
    s.add_argument("--scenario", choices=["1", "2", "custom", "survey-artifact"], required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--artifact")
    s.add_argument("--covariates")
    s.add_argument("--independent", action="store_true", help="force R = I")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("score", parents=[common], help="ISE and ARI against a known truth")
    c.add_argument("--truth", required=True)
    c.add_argument("--run", help="run directory; omit to score the truth against itself")
    c.add_argument("--grid", type=int, default=300)
    c.add_argument("--out")
    c.set_defaults(func=cmd_score)

    m = sub.add_parser("summary", parents=[common], help="acceptance rates and cluster counts")
    m.add_argument("--run", required=True)
    m.add_argument("--traces", action="store_true")
    m.set_defaults(func=cmd_summary)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (IngestionError, FileNotFoundError) as exc:
        code = EXIT_INPUT
        err = exc
    except ConfigError as exc:
        code = EXIT_CONFIG
        err = exc
    except (ValueError, RuntimeError, OSError) as exc:
        code = EXIT_RUNTIME
        err = exc
    if args.error_json:
        sys.stderr.write(json.dumps({"error": type(err).__name__, "message": str(err), "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"flower: error: {err}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
