"""Time the compiled kernels against the pure-Python fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is run on identical inputs by both backends; the table reports
the best-of-``repeat`` wall time per call and the speed-up.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from wfanova import kernels
from wfanova.basis import make_basis
from wfanova.model import _kernel_args
from wfanova.simulation import generate_replication, make_sim_model
from wfanova.estimation import FitConfig, _alloc, initialize_params


def _cases(backend, params, group):
    rng = np.random.default_rng(0)
    r, J = params.r, group.J
    basis = make_basis(3, 10, (0.0, 1.0))
    t = np.linspace(0, 1, 2000)
    theta = rng.normal(0, 0.5, 200)
    tau0 = np.asarray(params.knots.tau0)
    args = _kernel_args(params, group)
    etas = rng.normal(0, 0.2, (200, r))
    xis = rng.normal(0, 0.1, (200, J, r))
    n = 200
    normals = rng.standard_normal((n, J + 1, r))
    uniforms = rng.uniform(size=(n, J + 1))
    L = np.linalg.cholesky(params.Sigma)
    M = np.linalg.cholesky(params.Omega)
    Si, Oi = np.linalg.inv(params.Sigma), np.linalg.inv(params.Omega)

    def chain():
        backend.group_chain(*args, L, Si, M, Oi, np.zeros(r), np.zeros((J, r)),
                            np.ones(2), normals, uniforms, n // 5, _alloc(params, J))

    return {
        "bspline_design (2000 pts)": lambda: backend.bspline_design(
            basis.knots, 3, t),
        "jupp_inverse x200": lambda: [backend.jupp_inverse(theta[k:k + 1], 0.0, 1.0)
                                      for k in range(200)],
        "warped_times (2000 pts)": lambda: backend.warped_times(theta[:r], 0.0, 1.0, tau0, t),
        "group_logliks (200 warps)": lambda: backend.group_logliks(*args, etas, xis),
        "group_chain (200 sweeps)": chain,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="also write the timings as JSON")
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        sys.stderr.write("compiled kernels are not built; run `pip install -e .` first\n")
        return 1
    spec = make_sim_model(3)
    data, _ = generate_replication(spec, 1)
    params = initialize_params(data, FitConfig(p=1, q=1, tau0=spec.fit_tau0, register_init=False))
    group = data.groups[0]
    rows = []
    py_cases = _cases(backends["python"], params, group)
    cy_cases = _cases(backends["cython"], params, group)
    for name in py_cases:
        times = {}
        for label, fn in (("python", py_cases[name]), ("cython", cy_cases[name])):
            number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
            times[label] = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
        rows.append({"kernel": name, **times, "speedup": times["python"] / times["cython"]})
    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{width}}  {'python':>11}  {'cython':>11}  {'speed-up':>8}")
    for r in rows:
        print(f"{r['kernel']:<{width}}  {r['python'] * 1e3:>9.3f}ms  {r['cython'] * 1e3:>9.3f}ms"
              f"  {r['speedup']:>7.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
