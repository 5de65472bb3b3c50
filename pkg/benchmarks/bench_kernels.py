"""Compare the compiled kernel extension against the pure-NumPy fallback.

Times the three hot kernels head to head in one process, then (unless
--skip-e2e) runs a small Monte Carlo sweep in a subprocess per backend with
MWDML_BACKEND forced, since the backend is chosen once at import.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--skip-e2e]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from mwdml import _backend, _kernels_py
from mwdml._rng import derive_key

try:
    from mwdml import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_workloads():
    rng = np.random.default_rng(0)
    key = derive_key(123, 4)

    n, p = 4000, 60
    X = rng.normal(size=(n, p))
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    beta = np.zeros(p)
    beta[:6] = rng.normal(size=6)
    y = X @ beta + rng.normal(size=n)
    w = np.ones(n)

    m = 200_000
    xs = np.sort(rng.normal(size=m))
    ys = rng.normal(size=m) + 0.5 * (xs > 0.3)

    return [
        ("uniform_block (1e6)", lambda mod: mod.uniform_block(key, 1_000_000)),
        ("lasso_cd (4000x60)", lambda mod: mod.lasso_cd(X, y, w, 0.05, 1e-8, 500)),
        ("split_scan (2e5)", lambda mod: mod.split_scan(xs, ys, 20)),
    ]


def run_kernel_table(repeat):
    mods = [("python", _kernels_py)] + ([("compiled", _kernels)] if _kernels else [])
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name, _ in mods) + f"{'speedup':>10}")
    for label, call in kernel_workloads():
        row = [best_of(lambda m=mod: call(m), repeat) for _, mod in mods]
        cells = "".join(f"{t * 1e3:>10.2f}ms" for t in row)
        speed = f"{row[0] / row[-1]:>9.2f}x" if len(row) == 2 else f"{'n/a':>10}"
        print(f"{label:<22}{cells}{speed}")


_E2E_SNIPPET = """
import json, time
from mwdml._backend import backend_name
from mwdml.harness import McConfig, run_monte_carlo
cfg = McConfig.from_dict({
    "dgp": {"kind": "plr", "params": {}},
    "nuisance": "lasso",
    "shapes": [[30, 30]],
    "replications": 60,
    "seed": 9,
    "oracle_mode": "off",
})
t0 = time.perf_counter()
result = run_monte_carlo(cfg)
print(json.dumps({"backend": backend_name(), "seconds": time.perf_counter() - t0,
                  "coverage": result.summaries[0].coverage[0]}))
"""


def run_e2e():
    print("\nend-to-end: lasso-nuisance sweep, (30,30) x 60 replications")
    rows = {}
    for backend in ("python", "compiled"):
        if backend == "compiled" and _kernels is None:
            print("  compiled: extension not built, skipped")
            continue
        env = dict(os.environ, MWDML_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, "-c", _E2E_SNIPPET], env=env, capture_output=True, text=True, check=True
        )
        info = json.loads(out.stdout)
        rows[backend] = info
        print(f"  {info['backend']:<9} {info['seconds'] * 1e3:>9.1f}ms  coverage={info['coverage']:.3f}")
    if len(rows) == 2:
        assert rows["python"]["coverage"] == rows["compiled"]["coverage"], "backends disagree"
        print(f"  speedup {rows['python']['seconds'] / rows['compiled']['seconds']:.2f}x; "
              "identical coverage, as required")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="best-of repetitions per kernel")
    ap.add_argument("--skip-e2e", action="store_true", help="kernel table only")
    args = ap.parse_args()

    print(f"active backend: {_backend.backend_name()}"
          + ("" if _kernels else "  (compiled extension not built)"))
    run_kernel_table(args.repeat)
    if not args.skip_e2e:
        run_e2e()


if __name__ == "__main__":
    main()
