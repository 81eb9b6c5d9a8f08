"""Data-generating models 1-10, error functionals and the estimator benchmark."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .basis import eval_basis
from .estimation import (FitConfig, fit_common_anova, fit_two_step, fit_warped_anova,
                         register_least_squares)
from .model import ObservationSet
from .warp import jupp_forward

ESTIMATORS = ("C", "2s", "ML")
DENSE_GRID = 2000
_NORMALIZER = 1.68


def normal_density(t, a, b):
    """``N(a, b^2)`` density evaluated at ``t``."""
    if not b > 0:
        raise ValueError("standard deviation must be positive")
    z = (np.asarray(t, dtype=float) - a) / b
    return np.exp(-0.5 * z * z) / (b * math.sqrt(2.0 * math.pi))


def _mu(t):
    return 0.6 * normal_density(t, 0.3, 0.1) + 0.4 * normal_density(t, 0.6, 0.1)


def _bump1(t):
    return normal_density(t, 0.3, 0.1) / _NORMALIZER


def _bump2(t):
    return normal_density(t, 0.6, 0.1) / _NORMALIZER


def _second_pc(t):
    return (_bump2(t) - 0.105 * _bump1(t)) / 0.99


@dataclass(frozen=True)
class SimModelSpec:
    """One of the ten simulation models, with the fixed balanced design."""

    model_id: int
    phi: tuple
    psi: tuple
    gamma: tuple
    lam: tuple
    tau0: tuple
    Sigma: np.ndarray
    Omega: np.ndarray
    fit_tau0: tuple
    scores: str = "normal"
    I: int = 10
    J: int = 5
    nu: int = 20
    sigma2: float = 0.01
    interval: tuple = (0.0, 1.0)
    contamination: tuple = (0.10, 5.0)
    t_df: float = 4.0

    mu = staticmethod(_mu)

    @property
    def p(self):
        return len(self.phi)

    @property
    def q(self):
        return len(self.psi)

    @property
    def r(self):
        return len(self.tau0)

    @property
    def grid(self):
        return np.linspace(self.interval[0], self.interval[1], self.nu)

    def score_variances(self):
        """Actual variances of the drawn scores (scale times the law's variance)."""
        factor = {"normal": 1.0, "t4": self.t_df / (self.t_df - 2.0),
                  "contaminated": 1.0 - self.contamination[0]
                  + self.contamination[0] * self.contamination[1]}[self.scores]
        return np.asarray(self.gamma) * factor, np.asarray(self.lam) * factor


def make_sim_model(model_id):
    """Model ``model_id`` in 1..10."""
    if model_id not in range(1, 11):
        raise ValueError(f"model_id must be in 1..10, got {model_id}")
    one, two = (0.3,), (0.3, 0.6)
    g1, l1 = (0.2 ** 2,), (0.1 ** 2,)
    same = ((_bump1,), (_bump1,))
    diff = ((_bump1,), (_bump2,))
    both = ((_bump1, _second_pc), (_bump1, _second_pc))
    table = {
        1: (same, g1, l1, (), "normal"),
        2: (diff, g1, l1, (), "normal"),
        3: (same, g1, l1, one, "normal"),
        4: (diff, g1, l1, one, "normal"),
        5: (same, g1, l1, two, "normal"),
        6: (diff, g1, l1, two, "normal"),
        7: (diff, g1, l1, one, "t4"),
        8: (diff, g1, l1, one, "contaminated"),
        9: (both, (0.2 ** 2, 0.1 ** 2), (0.1 ** 2, 0.05 ** 2), one, "normal"),
        10: (both, (0.2 ** 2, 0.1 ** 2), (0.1 ** 2, 0.05 ** 2), two, "normal"),
    }
    (phi, psi), gam, lam, tau0, scores = table[model_id]
    r = len(tau0)
    fit_tau0 = tau0 if r else one
    return SimModelSpec(model_id, phi, psi, gam, lam, tau0, 0.2 ** 2 * np.eye(r),
                        0.1 ** 2 * np.eye(r), fit_tau0, scores)


def _draw_scores(rng, spec, var, size):
    scale = np.sqrt(np.asarray(var))
    if spec.scores == "normal":
        return scale * rng.standard_normal(size)
    if spec.scores == "t4":
        return scale * rng.standard_t(spec.t_df, size)
    eps, k = spec.contamination
    outlier = rng.random(size) < eps
    return scale * np.where(outlier, math.sqrt(k), 1.0) * rng.standard_normal(size)


def _cov_factor(M):
    """Cholesky factor, or a symmetric square root when ``M`` is only semidefinite."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(M)
        return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def generate_replication(spec, seed, I=None):
    """Draw one dataset from ``spec``; deterministic given ``seed``.

    Returns ``(data, truth)`` with true ``eta`` (I, r), ``xi`` (I, J, r),
    ``u`` (I, p) and ``v`` (I, J, q).
    """
    rng = np.random.default_rng(seed)
    I = spec.I if I is None else I
    J, r, p, q = spec.J, spec.r, spec.p, spec.q
    t = spec.grid
    a, b = spec.interval
    eta = rng.standard_normal((I, r)) @ _cov_factor(spec.Sigma).T if r else np.zeros((I, 0))
    xi = (rng.standard_normal((I, J, r)) @ _cov_factor(spec.Omega).T if r
          else np.zeros((I, J, 0)))
    u = _draw_scores(rng, spec, spec.gamma, (I, p))
    v = _draw_scores(rng, spec, spec.lam, (I, J, q))
    eps = math.sqrt(spec.sigma2) * rng.standard_normal((I, J, t.size))
    tau0 = np.asarray(spec.tau0, float)
    theta0 = jupp_forward(tau0, a, b) if r else np.zeros(0)
    subjects = []
    for i in range(I):
        grp = []
        for j in range(J):
            s = kernels.warped_times(theta0 + eta[i] + xi[i, j], a, b, tau0, t) if r else t
            z = spec.mu(s)
            for k in range(p):
                z = z + u[i, k] * spec.phi[k](s)
            for k in range(q):
                z = z + v[i, j, k] * spec.psi[k](s)
            grp.append((t.copy(), z + eps[i, j]))
        subjects.append(grp)
    data = ObservationSet.from_subjects(subjects, spec.interval)
    return data, {"eta": eta, "xi": xi, "u": u, "v": v, "theta0": theta0}


@dataclass(frozen=True)
class ErrorReport:
    """Integrated bias, standard deviation and root mean squared error."""

    bias: float
    sd: float
    rmse: float
    n: int


def _weights(grid):
    w = np.empty_like(grid)
    h = np.diff(grid)
    w[0], w[-1] = h[0] / 2, h[-1] / 2
    w[1:-1] = (h[:-1] + h[1:]) / 2
    return w


def dense_grid(interval=(0.0, 1.0), n=DENSE_GRID):
    return np.linspace(interval[0], interval[1], n)


def error_metrics(estimates, truth, grid=None, *, align=False, paper_literal=False):
    """Bias, sd and rmse of replicated function estimates.

    Parameters
    ----------
    estimates : array (R, G)
        Estimates evaluated on ``grid`` (one row per replication).
    truth : array (G,)
        True function on ``grid``.
    grid : array (G,), optional
        Quadrature grid; 2000 equispaced points on [0, 1] by default.
    align : bool
        Flip each estimate by the sign of its inner product with the truth.
    paper_literal : bool
        With ``align``, multiply by the inner product itself instead of its sign.
    """
    F = np.atleast_2d(np.asarray(estimates, dtype=float))
    f0 = np.asarray(truth, dtype=float)
    grid = dense_grid(n=f0.size) if grid is None else np.asarray(grid, float)
    if F.shape[1] != f0.size or grid.size != f0.size:
        raise ValueError("estimates, truth and grid must share the evaluation grid")
    if F.shape[0] < 2:
        raise ValueError("need at least two replications")
    w = _weights(grid)
    if align:
        ip = F @ (w * f0)
        factor = ip if paper_literal else np.where(ip < 0, -1.0, 1.0)
        F = F * factor[:, None]
    mean = F.mean(axis=0)
    bias2 = float(w @ (mean - f0) ** 2)
    var = float(w @ ((F - mean) ** 2).mean(axis=0))
    return ErrorReport(math.sqrt(bias2), math.sqrt(var), math.sqrt(bias2 + var), F.shape[0])


# ---------------------------------------------------------------------------
# Benchmark


def _targets(spec):
    names = ["mu"] + [f"phi{k + 1}" for k in range(spec.p)] + [f"psi{k + 1}" for k in range(spec.q)]
    return names


def _truth_curves(spec, grid):
    out = {"mu": spec.mu(grid)}
    for k, f in enumerate(spec.phi):
        out[f"phi{k + 1}"] = f(grid)
    for k, f in enumerate(spec.psi):
        out[f"psi{k + 1}"] = f(grid)
    return out


def _fitted_curves(result, grid):
    B = eval_basis(result.params.basis, grid)
    P = result.params
    out = {"mu": B @ P.m}
    for k in range(P.p):
        out[f"phi{k + 1}"] = B @ P.C[:, k]
    for k in range(P.q):
        out[f"psi{k + 1}"] = B @ P.D[:, k]
    return out


def replication_seed(seed, model_id, rep):
    """Integer seed derived from ``(seed, model, rep)``."""
    return int(np.random.SeedSequence([int(seed), int(model_id), int(rep)]).generate_state(1)[0])


def _one_replication(args):
    model_id, rep, seed, estimators, config = args
    spec = make_sim_model(model_id)
    data, _ = generate_replication(spec, replication_seed(seed, model_id, rep))
    grid = dense_grid(spec.interval)
    cfg = replace(config, p=spec.p, q=spec.q, tau0=spec.fit_tau0,
                  seed=replication_seed(seed + 1, model_id, rep), threads=1)
    out = {}
    reg = None
    if "2s" in estimators or "ML" in estimators:
        reg = register_least_squares(data, cfg.make_knots(data), cfg.register_sweeps,
                                     basis=cfg.make_basis(data), max_evals=cfg.register_evals)
    for est in estimators:
        try:
            if est == "C":
                res = fit_common_anova(data, cfg)
            elif est == "2s":
                res = fit_two_step(data, cfg, registration=reg)
            else:
                res = fit_warped_anova(data, cfg, registration=reg)
            out[est] = {"curves": _fitted_curves(res, grid), "converged": res.converged,
                        "h_z": res.h_z,
                        "h_w": res.h_w if res.params.r else float("nan")}
        except Exception as exc:  # recorded and excluded from the metrics
            out[est] = {"error": f"{type(exc).__name__}: {exc}"}
    return model_id, rep, out


@dataclass
class BenchmarkTable:
    """Table-1 style results: ``cells[(model, target, estimator)] -> ErrorReport``."""

    cells: dict
    failures: dict
    n_reps: int
    seed: int
    estimators: tuple
    raw: dict = field(default_factory=dict, repr=False)

    def rows(self):
        for (model, target, est), rep in sorted(self.cells.items(),
                                                key=lambda kv: (kv[0][0], _target_order(kv[0][1]),
                                                                ESTIMATORS.index(kv[0][2]))):
            yield {"model": model, "target": target, "estimator": est, "bias": rep.bias,
                   "sd": rep.sd, "rmse": rep.rmse, "n_ok": rep.n,
                   "n_failed": self.failures.get((model, est), 0)}


def _target_order(name):
    return (0, 0) if name == "mu" else ((1 if name.startswith("phi") else 2), int(name[3:]))


def run_benchmark(model_ids, n_reps, estimators=ESTIMATORS, seed=0, parallelism=1, config=None,
                  *, paper_literal=False):
    """Replicated comparison of the estimators on the simulation models.

    Replication ``rep`` of model ``m`` uses data seed derived from
    ``(seed, m, rep)``; results are aggregated in a fixed order, so the table
    does not depend on ``parallelism``. Failed fits are excluded and counted.
    """
    if n_reps < 2:
        raise ValueError("n_reps must be at least 2")
    estimators = tuple(e for e in ESTIMATORS if e in set(estimators))
    config = config or FitConfig()
    jobs = [(int(m), rep, int(seed), estimators, config) for m in model_ids for rep in range(n_reps)]
    if parallelism and parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            results = list(ex.map(_one_replication, jobs, chunksize=1))
    else:
        results = [_one_replication(j) for j in jobs]
    results.sort(key=lambda x: (x[0], x[1]))
    cells, failures, raw = {}, {}, {}
    grid = dense_grid()
    for m in dict.fromkeys(int(x) for x in model_ids):
        spec = make_sim_model(m)
        truth = _truth_curves(spec, grid)
        mine = [res for mm, _, res in results if mm == m]
        raw[m] = mine
        for est in estimators:
            ok = [res[est] for res in mine if "error" not in res[est]]
            failures[(m, est)] = len(mine) - len(ok)
            if len(ok) < 2:
                continue
            for target in _targets(spec):
                F = np.array([o["curves"][target] for o in ok])
                cells[(m, target, est)] = error_metrics(F, truth[target], grid,
                                                        align=target != "mu",
                                                        paper_literal=paper_literal)
    return BenchmarkTable(cells, failures, n_reps, seed, estimators, raw)


__all__ = [
    "BenchmarkTable", "ErrorReport", "SimModelSpec", "dense_grid", "error_metrics",
    "generate_replication", "make_sim_model", "normal_density", "replication_seed",
    "run_benchmark",
]
