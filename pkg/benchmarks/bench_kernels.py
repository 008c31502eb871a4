"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--n 1000] [--repeat 5] [--sweeps 20]

Times the two hot loops on identical inputs, checks that both backends produce
the same allocations, then times whole sampler sweeps under each backend.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from flower import _kernels_py

try:
    from flower import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def z_inputs(n, K, Ks, V, seed):
    rng = np.random.default_rng(seed)
    rel = rng.uniform(0.01, 1.0, size=(n, K))
    cell = rng.integers(0, V, size=n).astype(np.int64)
    s_star = rng.integers(0, Ks, size=V).astype(np.int64)
    group = s_star[cell]
    z = rng.integers(0, K, size=n).astype(np.int64)
    n_star = np.zeros((Ks, K), dtype=np.int64)
    cc = np.zeros((V, K), dtype=np.int64)
    np.add.at(n_star, (group, z), 1)
    np.add.at(cc, (cell, z), 1)
    m_star = np.bincount(s_star, minlength=Ks).astype(np.int64)
    return dict(rel=rel, z=z, group=group, cell=cell, n_star=n_star, cc=cc, s_star=s_star,
                m_star=m_star, prior=rng.dirichlet(np.ones(K)) * 2.0,
                u=rng.uniform(size=n), uv=rng.uniform(size=V))


def run_sweep(mod, inp):
    z, ns, cc = inp["z"].copy(), inp["n_star"].copy(), inp["cc"].copy()
    t = time.perf_counter()
    mod.sweep_z(inp["rel"], z, inp["group"], inp["cell"], ns, cc, inp["prior"], inp["u"],
                np.empty(inp["rel"].shape[1]))
    return time.perf_counter() - t, z


def run_gibbs(mod, inp):
    s, ns, ms = inp["s_star"].copy(), inp["n_star"].copy(), inp["m_star"].copy()
    t = time.perf_counter()
    mod.gibbs_s_star(s, inp["cc"], ns, ms, inp["prior"], 2.0, 1.0 / ns.shape[0], inp["uv"],
                     np.empty(ns.shape[0]))
    return time.perf_counter() - t, s


def best(fn, mod, inp, repeat):
    times, out = [], None
    for _ in range(repeat):
        dt, out = fn(mod, inp)
        times.append(dt)
    return min(times), out


SWEEP_SCRIPT = """
import time, numpy as np
from flower import kernels, simgen
from flower.sampler import Hyperparameters, Sampler
_, data = simgen.scenario1({n}, np.random.default_rng(0))
s = Sampler(data, Hyperparameters(iterations=10**6, burn_in=0, seed=1))
s.step()
t = time.perf_counter()
for _ in range({sweeps}):
    s.step()
print(kernels.BACKEND, (time.perf_counter() - t) / {sweeps})
"""


def full_sweep(n, sweeps, pure):
    env = dict(os.environ)
    env["FLOWER_PURE_PYTHON"] = "1" if pure else "0"
    out = subprocess.run([sys.executable, "-c", SWEEP_SCRIPT.format(n=n, sweeps=sweeps)],
                         env=env, capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sweeps", type=int, default=20)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    if _kernels_c is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    inp = z_inputs(args.n, K=10, Ks=20, V=720, seed=0)
    res = {}
    for name, fn in (("sweep_z", run_sweep), ("gibbs_s_star", run_gibbs)):
        t_py, out_py = best(fn, _kernels_py, inp, args.repeat)
        t_c, out_c = best(fn, _kernels_c, inp, args.repeat)
        res[name] = {"python_s": t_py, "cython_s": t_c, "speedup": t_py / t_c,
                     "identical": bool(np.array_equal(out_py, out_c))}
    for pure in (False, True):
        backend, dt = full_sweep(args.n, args.sweeps, pure)
        res[f"sweep_{backend}_s"] = dt
    res["sweep_speedup"] = res["sweep_python_s"] / res["sweep_cython_s"]

    if args.json:
        print(json.dumps(res, indent=2))
        return
    print(f"n={args.n}  K=10  K*=20  cells=720")
    for name in ("sweep_z", "gibbs_s_star"):
        r = res[name]
        print(f"{name:14s} python {r['python_s'] * 1e3:9.2f} ms  cython {r['cython_s'] * 1e3:8.3f} ms"
              f"  x{r['speedup']:.0f}  identical={r['identical']}")
    print(f"{'full sweep':14s} python {res['sweep_python_s'] * 1e3:9.2f} ms  "
          f"cython {res['sweep_cython_s'] * 1e3:8.3f} ms  x{res['sweep_speedup']:.1f}")


if __name__ == "__main__":
    main()
