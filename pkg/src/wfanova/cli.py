"""Command-line front end: ``wfanova {fit,simulate,benchmark,report}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every run writes ``manifest.json``; failures also write ``error.json``.
"""

import argparse
import csv
import io
import json
import math
import os
import shutil
import sys
import tempfile
import warnings

import numpy as np

from . import __version__, kernels
from .basis import eval_basis
from .estimation import (FitConfig, fit_common_anova, fit_two_step, fit_warped_anova)
from .inference import (anova_f_test, bootstrap_ratios, variance_ratio_report)
from .model import ComputationError, ObservationSet
from .simulation import ESTIMATORS, generate_replication, make_sim_model, run_benchmark

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
REQUIRED_COLUMNS = ("group_id", "subject_id", "t", "y")


class DataError(ValueError):
    """Malformed input data; ``line`` is the 1-based file line when known."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Serialization


def fmt(x):
    """17-significant-digit text for a float (lossless round trip)."""
    return format(float(x), ".17g")


def _json(obj, indent=0):
    pad = "  " * (indent + 1)
    end = "  " * indent
    if obj is None or (isinstance(obj, (float, np.floating)) and not math.isfinite(obj)):
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _json(obj.tolist(), indent)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_json(v, indent + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _json(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj):
    return _json(obj) + "\n"


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Ingestion


def _sort_key(labels):
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def ingest_csv(path, log_y=False, rescale_endpoints=False):
    """Read long-format data with columns ``group_id, subject_id, t, y``.

    Rows may come in any order; groups and subjects are sorted by label
    (numerically when all labels are numeric) and grids by ``t``.

    Parameters
    ----------
    path : str
    log_y : bool
        Replace ``y`` by ``log(y)`` (requires ``y > 0``).
    rescale_endpoints : bool
        Stretch each subject's grid linearly from the common start so that it
        ends at the median of the subjects' last time points.

    Returns
    -------
    ObservationSet

    Raises
    ------
    DataError
        Missing columns, non-numeric cells or duplicate ``(subject, t)``.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    records = {}
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", 1) from None
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError(f"missing required column(s): {', '.join(missing)}", 1)
        col = {c: header.index(c) for c in REQUIRED_COLUMNS}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"expected {len(header)} fields, found {len(row)}", line)
            gid, sid = row[col["group_id"]].strip(), row[col["subject_id"]].strip()
            if not gid or not sid:
                raise DataError("empty group_id or subject_id", line)
            vals = []
            for name in ("t", "y"):
                cell = row[col[name]].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"non-numeric {name} value {cell!r}", line) from None
                if not math.isfinite(v):
                    raise DataError(f"non-finite {name} value {cell!r}", line)
                vals.append(v)
            t, y = vals
            if log_y:
                if y <= 0:
                    raise DataError(f"log transform needs y > 0, found {y}", line)
                y = math.log(y)
            subj = records.setdefault(gid, {}).setdefault(sid, {})
            if t in subj:
                raise DataError(f"duplicate time {t} for subject {sid!r} of group {gid!r}", line)
            subj[t] = y
    if not records:
        raise DataError("no data rows")
    gids = _sort_key(list(records))
    subjects = []
    for gid in gids:
        grp = []
        for sid in _sort_key(list(records[gid])):
            pts = sorted(records[gid][sid].items())
            grp.append((np.array([p[0] for p in pts]), np.array([p[1] for p in pts])))
        subjects.append(grp)
    if rescale_endpoints:
        start = min(float(t[0]) for grp in subjects for t, _ in grp)
        ends = [float(t[-1]) for grp in subjects for t, _ in grp]
        target = float(np.median(ends))
        for grp in subjects:
            for k, (t, y) in enumerate(grp):
                span = t[-1] - start
                if span > 0:
                    grp[k] = (start + (t - start) * (target - start) / span, y)
    lo = min(float(t[0]) for grp in subjects for t, _ in grp)
    hi = max(float(t[-1]) for grp in subjects for t, _ in grp)
    if not lo < hi:
        raise DataError("all time points coincide; the interval is degenerate")
    labels = [tuple(_sort_key(list(records[g]))) for g in gids]
    return ObservationSet.from_subjects(subjects, (lo, hi), gids, labels)


def write_data_csv(data):
    rows = []
    for i, g in enumerate(data.groups):
        gid = data.group_ids[i]
        for j in range(g.J):
            sid = g.subject_ids[j]
            t, y = g.subject(j)
            rows.extend((gid, sid, float(tk), float(yk)) for tk, yk in zip(t, y))
    return _csv_text(REQUIRED_COLUMNS, rows)


# ---------------------------------------------------------------------------
# Output directory handling


class _Output:
    """Collects files and publishes them into ``path`` in one step."""

    def __init__(self, path):
        self.path = os.path.abspath(path)
        parent = os.path.dirname(self.path) or "."
        if not os.path.isdir(parent):
            raise UsageError(f"parent directory of --out does not exist: {parent}")
        if os.path.exists(self.path) and not os.path.isdir(self.path):
            raise UsageError(f"--out exists and is not a directory: {self.path}")
        self.files = {}

    def add(self, name, text):
        self.files[name] = text

    def commit(self):
        parent = os.path.dirname(self.path)
        tmp = tempfile.mkdtemp(prefix=".wfanova-", dir=parent)
        try:
            for name, text in self.files.items():
                with open(os.path.join(tmp, name), "w", encoding="utf-8", newline="") as fh:
                    fh.write(text)
            if not os.path.exists(self.path):
                os.rename(tmp, self.path)
                return
            for name in self.files:
                os.replace(os.path.join(tmp, name), os.path.join(self.path, name))
        finally:
            if os.path.isdir(tmp):
                shutil.rmtree(tmp, ignore_errors=True)


def _manifest(args, seed):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    return {"tool": "wfanova", "version": __version__, "command": args.command,
            "arguments": cfg, "seed": seed, "kernel_backend": kernels.BACKEND}


# ---------------------------------------------------------------------------
# Subcommands


def _parse_floats(text, name):
    if text is None or text.strip() == "":
        return ()
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated list of numbers") from None


def _resolve_seed(args):
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().generate_state(1)[0])
    return args.seed


def _config(args, data=None):
    tau0 = _parse_floats(args.tau0, "--tau0")
    mc = args.mc_size
    kw = dict(p=args.p, q=args.q, tau0=tau0, n_interior_knots=args.basis_knots,
              degree=args.degree, em_max_iter=args.em_iters, em_tol=args.em_tol,
              penalty_lambda=args.penalty, seed=args.seed, threads=args.threads)
    if mc is not None:
        kw.update(mc_start=mc, mc_cap=max(mc, 1600))
    try:
        cfg = FitConfig(**kw)
        if data is not None:
            cfg.make_knots(data)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _fit(data, cfg, estimator):
    if estimator == "common" or cfg.r == 0:
        return fit_common_anova(data, cfg)
    if estimator == "two-step":
        return fit_two_step(data, cfg)
    return fit_warped_anova(data, cfg)


def _curves(res, data, n_curve, n_warp):
    P = res.params
    a, b = P.basis.a, P.basis.b
    tc = np.linspace(a, b, n_curve)
    tw = np.linspace(a, b, n_warp)
    tau0 = np.asarray(P.knots.tau0, float)
    fit_rows, warp_rows = [], []
    for i, g in enumerate(data.groups):
        gid = data.group_ids[i]
        for j in range(g.J):
            sid = g.subject_ids[j]
            if P.r:
                th = np.asarray(res.theta_hat[i][j], float)
                tinv = np.clip(kernels.warped_times(th, a, b, tau0, tc), a, b)
                w = kernels.hermite_eval(*_warp_nodes(P, th), tw)
            else:
                tinv, w = tc, tw
            coef = P.m + P.C @ res.u_hat[i] + P.D @ res.v_hat[i][j]
            xhat = eval_basis(P.basis, tinv) @ coef
            fit_rows.extend((gid, sid, float(t), float(v)) for t, v in zip(tc, xhat))
            warp_rows.extend((gid, sid, float(t), float(v)) for t, v in zip(tw, w))
    return (_csv_text(("group_id", "subject_id", "t", "fitted"), fit_rows),
            _csv_text(("group_id", "subject_id", "t", "w"), warp_rows))


def _warp_nodes(P, theta):
    from .warp import warp_from_theta
    w = warp_from_theta(P.knots, theta)
    return w.nodes, w.values, w.slopes


def cmd_fit(args):
    seed = _resolve_seed(args)
    out = _Output(args.out)
    data = ingest_csv(args.input, args.log_y, args.rescale_endpoints)
    cfg = _config(args, data)
    res = _fit(data, cfg, args.estimator)
    report = {
        "estimator": res.estimator,
        "converged": bool(res.converged),
        "n_iter": int(res.n_iter),
        "loglik": res.loglik,
        "loglik_trace": [float(x) for x in res.loglik_trace],
        "loglik_se_trace": [float(x) for x in res.loglik_se_trace],
        "n_groups": data.I,
        "n_subjects": data.n_subjects,
        "n_obs": data.n_obs,
        "interval": [data.a, data.b],
        "transforms": {"log_y": bool(args.log_y), "rescale_endpoints": bool(args.rescale_endpoints)},
        "flags": {k: v for k, v in res.flags.items()},
        "kernel_backend": kernels.BACKEND,
        "seed": seed,
    }
    ratios = {"level": args.level}
    if data.I >= 3 and res.params.p + res.params.q:
        vr = variance_ratio_report(res, args.level)
        ratios.update(h_z=vr.h_z, avar_hz=vr.avar_hz, ci_hz=list(vr.ci_hz), cond_F=vr.cond_F,
                      h_w=vr.h_w, avar_hw=vr.avar_hw, ci_hw=list(vr.ci_hw), cond_G=vr.cond_G,
                      flags=vr.flags)
    else:
        ratios.update(h_z=res.h_z if res.params.p + res.params.q else None,
                      h_w=res.h_w if res.params.r else None,
                      flags={"inference": "skipped: needs at least 3 groups"})
    report["variance_ratios"] = ratios
    tests = []
    if res.params.r and data.I >= 2:
        for k in range(res.params.r):
            try:
                ft = anova_f_test([np.asarray(th)[:, k] for th in res.theta_hat])
                tests.append({"target": f"theta[{k}]", "F": ft.F, "p_value": ft.p_value,
                              "df_between": ft.df_between, "df_within": ft.df_within,
                              "flag": ft.flag})
            except ValueError as exc:
                tests.append({"target": f"theta[{k}]", "error": str(exc)})
    report["f_tests"] = tests
    if args.bootstrap:
        boot = bootstrap_ratios(data, cfg, args.bootstrap, seed, parallelism=cfg.n_threads())
        report["bootstrap"] = {"B": args.bootstrap, "h_z": boot.h_z.tolist(),
                               "h_w": boot.h_w.tolist(), "sd_hz": boot.sd_hz,
                               "sd_hw": boot.sd_hw, "flags": boot.flags}
    params = res.params.to_dict()
    params["flags"] = {k: bool(v) for k, v in res.params.flags.items()}
    fitted, warps = _curves(res, data, args.curve_points, args.warp_points)
    out.add("params.json", dumps(params))
    out.add("report.json", dumps(report))
    out.add("fitted_curves.csv", fitted)
    out.add("warps.csv", warps)
    out.add("manifest.json", dumps(_manifest(args, seed)))
    out.commit()
    return EXIT_OK


def cmd_simulate(args):
    seed = _resolve_seed(args)
    out = _Output(args.out)
    try:
        spec = make_sim_model(args.model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data, truth = generate_replication(spec, seed, I=args.groups)
    out.add("data.csv", write_data_csv(data))
    out.add("truth.json", dumps({
        "model": args.model, "tau0": list(spec.tau0), "fit_tau0": list(spec.fit_tau0),
        "gamma": list(spec.gamma), "lambda": list(spec.lam), "Sigma": spec.Sigma,
        "Omega": spec.Omega, "sigma2": spec.sigma2, "scores": spec.scores,
        "eta": truth["eta"], "xi": truth["xi"], "u": truth["u"], "v": truth["v"]}))
    out.add("manifest.json", dumps(_manifest(args, seed)))
    out.commit()
    return EXIT_OK


def cmd_benchmark(args):
    seed = _resolve_seed(args)
    out = _Output(args.out)
    models = [int(x) for x in _parse_floats(args.models, "--models")]
    ests = tuple(x.strip() for x in args.estimators.split(","))
    if any(e not in ESTIMATORS for e in ests) or any(m not in range(1, 11) for m in models):
        raise UsageError(f"estimators must be among {ESTIMATORS} and models in 1..10")
    if args.reps < 2:
        raise UsageError("--reps must be at least 2")
    cfg = FitConfig(n_interior_knots=args.basis_knots, degree=args.degree,
                    em_max_iter=args.em_iters, em_tol=args.em_tol, penalty_lambda=args.penalty,
                    **({"mc_start": args.mc_size, "mc_cap": max(args.mc_size, 1600)}
                       if args.mc_size else {}))
    threads = args.threads or os.cpu_count() or 1
    table = run_benchmark(models, args.reps, ests, seed, threads, cfg)
    long_rows, wide = [], {}
    for row in table.rows():
        long_rows.append((row["model"], row["target"], row["estimator"], row["bias"], row["sd"],
                          row["rmse"], row["n_ok"], row["n_failed"]))
        wide.setdefault((row["model"], row["target"]), {})[row["estimator"]] = row
    header = ["model", "target"] + [f"{m}_{e}" for m in ("bias", "sd", "rmse") for e in ests] \
        + [f"n_failed_{e}" for e in ests]
    rows = []
    for (model, target), cells in wide.items():
        vals = [cells[e][m] if e in cells else float("nan") for m in ("bias", "sd", "rmse")
                for e in ests]
        fails = [table.failures.get((model, e), 0) for e in ests]
        rows.append([model, target] + vals + fails)
    out.add("benchmark_table.csv", _csv_text(header, rows))
    out.add("benchmark_long.csv", _csv_text(
        ("model", "target", "estimator", "bias", "sd", "rmse", "n_ok", "n_failed"), long_rows))
    out.add("manifest.json", dumps(_manifest(args, seed)))
    out.commit()
    return EXIT_OK


def cmd_report(args):
    """Render a plain-text summary of a fit or benchmark output directory."""
    src = args.input
    lines = []
    rep_path = os.path.join(src, "report.json")
    tab_path = os.path.join(src, "benchmark_table.csv")
    if not os.path.exists(rep_path) and not os.path.exists(tab_path):
        raise DataError(f"{src} holds neither report.json nor benchmark_table.csv")
    if os.path.exists(rep_path):
        with open(rep_path, encoding="utf-8") as fh:
            try:
                rep = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"report.json is not valid JSON: {exc.msg}", exc.lineno) from None
        vr = rep.get("variance_ratios", {})
        lines.append(f"estimator: {rep['estimator']}  converged: {rep['converged']}  "
                     f"iterations: {rep['n_iter']}")
        lines.append(f"log-likelihood: {rep['loglik']:.6g}")
        for key in ("z", "w"):
            h = vr.get(f"h_{key}")
            if h is None:
                continue
            ci = vr.get(f"ci_h{key}")
            ci_txt = f"  {100 * vr['level']:.0f}% CI [{ci[0]:.4f}, {ci[1]:.4f}]" if ci else ""
            lines.append(f"h_{key} = {h:.4f}{ci_txt}")
        for ft in rep.get("f_tests", []):
            if "F" in ft:
                F = "inf" if ft["F"] is None else f"{ft['F']:.4g}"
                lines.append(f"F-test {ft['target']}: F = {F}, p = {ft['p_value']:.4g}")
    if os.path.exists(tab_path):
        with open(tab_path, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        lines.append("  ".join(f"{h:>10}" for h in head))
        for row in rows[1:]:
            cells = []
            for v in row:
                try:
                    cells.append(f"{float(v):>10.3f}" if "." in v or "e" in v else f"{v:>10}")
                except ValueError:
                    cells.append(f"{v:>10}")
            lines.append("  ".join(cells))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = _Output(args.out)
        out.add("summary.txt", text)
        out.add("manifest.json", dumps(_manifest(args, None)))
        out.commit()
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _fit_options(p):
    p.add_argument("-p", type=int, default=1, help="between-group amplitude components")
    p.add_argument("-q", type=int, default=1, help="within-group amplitude components")
    p.add_argument("--tau0", default="", help="comma-separated warping knots (empty: no warping)")
    p.add_argument("--basis-knots", type=int, default=10, help="interior B-spline knots")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--em-iters", type=int, default=200)
    p.add_argument("--em-tol", type=float, default=1e-6)
    p.add_argument("--mc-size", type=int, default=None,
                   help="initial Monte-Carlo size (doubles every 20 iterations)")
    p.add_argument("--penalty", type=float, default=0.0, help="penalty on tr(Sigma + Omega)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="wfanova", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to long-format CSV data")
    f.add_argument("--input", required=True)
    f.add_argument("--out", required=True)
    _fit_options(f)
    f.add_argument("--estimator", choices=("ML", "two-step", "common"), default="ML")
    f.add_argument("--log-y", action="store_true")
    f.add_argument("--rescale-endpoints", action="store_true")
    f.add_argument("--bootstrap", type=int, default=0, metavar="B")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--curve-points", type=int, default=101)
    f.add_argument("--warp-points", type=int, default=101)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="draw one dataset from a simulation model")
    s.add_argument("--model", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--groups", type=int, default=None, help="override the number of groups")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("benchmark", help="compare estimators over replications")
    b.add_argument("--models", default="1,3,4")
    b.add_argument("--reps", type=int, default=50)
    b.add_argument("--estimators", default="C,2s,ML")
    b.add_argument("--out", required=True)
    _fit_options(b)
    b.set_defaults(func=cmd_benchmark)

    r = sub.add_parser("report", help="summarize a fit or benchmark output directory")
    r.add_argument("--input", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return parser


def _diagnostics(args, code, exc):
    out = getattr(args, "out", None)
    if not out:
        return
    payload = {"exit_code": code, "error_type": type(exc).__name__, "message": str(exc),
               "line": getattr(exc, "line", None)}
    try:
        o = _Output(out)
        o.add("error.json", dumps(payload))
        o.commit()
    except (UsageError, OSError):
        pass


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return args.func(args)
    except UsageError as exc:
        code, err = EXIT_USAGE, exc
    except DataError as exc:
        code, err = EXIT_DATA, exc
    except (ComputationError, np.linalg.LinAlgError, ArithmeticError) as exc:
        code, err = EXIT_NUMERIC, exc
    except ValueError as exc:
        code, err = EXIT_DATA, exc
    sys.stderr.write(f"wfanova: error: {err}\n")
    _diagnostics(args, code, err)
    return code


if __name__ == "__main__":
    sys.exit(main())
