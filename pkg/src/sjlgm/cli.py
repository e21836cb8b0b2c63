"""Command-line interface: ``sjlgm {fit,simulate,compare,diagnose,validate,rerun}``.

Every option can also be supplied through an environment variable named
``SJLGM_<OPTION>`` (upper case, dashes as underscores), which replaces the
built-in default; explicit flags still win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("sjlgm")

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad flag combination; the message names the flag."""


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    def __init__(self, argv, args):
        self.argv = list(argv)
        self.args = args
        self.stages: dict[str, float] = {}
        self.outputs: list[str] = []
        self._t = time.perf_counter()

    def stage(self, name):
        now = time.perf_counter()
        self.stages[name] = now - self._t
        self._t = now

    def write(self, out_dir: Path) -> None:
        cfg = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {
            "command": self.argv,
            "config": cfg,
            "seed": getattr(self.args, "seed", None),
            "software": {"sjlgm": __version__, "python": platform.python_version(), "numpy": np.__version__},
            "wall_clock_seconds": self.stages,
            "outputs": {Path(p).name: _sha256(p) for p in sorted(self.outputs)},
        }
        with open(out_dir / MANIFEST, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True, default=str)
            fh.write("\n")


# -- argument parsing -----------------------------------------------------------

def _csv_list(s: str | None):
    if s is None or s == "":
        return None
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _float_list(s: str | None):
    if s is None or s == "":
        return None
    return tuple(float(x) for x in s.split(",") if x.strip())


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="maximum worker threads")
    p.add_argument("--verbose", "-v", action="store_true")


def _add_data(p, required=True):
    p.add_argument("--long", dest="long_path", required=required, help="longitudinal CSV")
    p.add_argument("--surv", dest="surv_path", required=required, help="survival CSV")
    p.add_argument("--graph", dest="graph_path", help="region adjacency file")
    p.add_argument("--long-covariates", help="comma-separated longitudinal covariate columns (default: all)")
    p.add_argument("--surv-covariates", help="comma-separated survival covariate columns (default: all)")
    p.add_argument("--validate-strict", action="store_true", help="reject longitudinal times equal to the survival time")
    p.add_argument("--clamp-times", action="store_true", help="clamp longitudinal times >= survival time instead of rejecting")


def _add_model(p):
    p.add_argument("--model", default="xi", help="preset N, i..xi, I..IV, or custom")
    p.add_argument("--model-config", help="key = value model file; other model flags override it")
    p.add_argument("--random-effects", choices=["none", "intercept", "intercept_slope"])
    p.add_argument("--linkage", choices=["none", "b0", "b1", "both"])
    p.add_argument("--spatial", choices=["none", "besag-proper"])
    p.add_argument("--zeta", default=None, help="mixing ratio in (0,1) or 'estimate' (default 0.95)")
    p.add_argument("--car-form", choices=["leroux", "pinv"])
    p.add_argument("--spline-degree", default="3", help="B-spline degree, or 'none' for an intercept only")
    p.add_argument("--spline-knots", help="explicit comma-separated interior knots")
    p.add_argument("--spline-nknots", type=int, default=1, help="number of quantile-placed interior knots")


def _add_inference(p, strategy="auto"):
    p.add_argument("--strategy", choices=["auto", "grid", "ccd", "eb"], default=strategy)
    p.add_argument("--correction", choices=["gaussian", "simplified_laplace"], default="gaussian")
    p.add_argument("--criteria-samples", type=int, default=1000, help="posterior draws for DIC/WAIC (0 skips)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sjlgm", description="Joint longitudinal and spatial survival models")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_inference(p)
    p.add_argument("--out", required=True, help="output directory, or a path ending in .json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="DIC/WAIC over several models")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_inference(p)
    p.add_argument("--models", default=",".join(["N", "i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x", "xi"]))
    p.add_argument("--out", required=True, help="output CSV path (manifest goes beside it)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate", help="simulation study")
    _add_common(p)
    p.add_argument("--scenario", default="1", choices=["1", "2", "3"])
    p.add_argument("--nk", type=int, default=20, help="subjects per region")
    p.add_argument("--K", type=int, default=None, help="number of regions (default per scenario)")
    p.add_argument("--M", type=int, default=100, help="replications")
    p.add_argument("--models", default=None, help="comma-separated presets (default I,II,III,IV; IV for scenario 3)")
    p.add_argument("--graph", dest="graph_path", help="graph file instead of the default lattice")
    p.add_argument("--spline-nknots", type=int, default=2)
    p.add_argument("--strategy", choices=["auto", "grid", "ccd", "eb"], default="eb")
    p.add_argument("--criteria-samples", type=int, default=1000, help="0 skips DIC/WAIC")
    p.add_argument("--keep-data", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="residuals, predictions and regional risk from a saved fit")
    _add_common(p)
    _add_data(p)
    p.add_argument("--fit", dest="fit_path", required=True, help="result JSON written by 'fit'")
    p.add_argument("--subjects", help="comma-separated subject ids to predict (default: first subject)")
    p.add_argument("--horizon", type=int, default=50, help="number of prediction times")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--out-dir", "--out", dest="out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("validate", help="check input files and print a summary")
    _add_common(p)
    _add_data(p)
    p.add_argument("--out", help="optional directory for summary.json")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--threads", type=int, help="override the thread count")
    p.add_argument("--out", help="override the output location")
    p.set_defaults(func=cmd_rerun)
    _apply_env(ap)
    return ap


def _apply_env(ap: argparse.ArgumentParser) -> None:
    subs = [a for a in ap._actions if isinstance(a, argparse._SubParsersAction)]
    for sp in subs:
        for p in sp.choices.values():
            for act in p._actions:
                if not act.option_strings or act.dest in ("help", "func"):
                    continue
                key = "SJLGM_" + act.dest.upper()
                if key in os.environ:
                    raw = os.environ[key]
                    if isinstance(act, argparse._StoreTrueAction):
                        val = raw.lower() in ("1", "true", "yes", "on")
                    elif act.type is not None:
                        val = act.type(raw)
                    else:
                        val = raw
                    act.default = val
                    act.required = False


# -- helpers ----------------------------------------------------------------------

def _load(args):
    from .data import load_dataset

    for flag, path in (("--long", args.long_path), ("--surv", args.surv_path)):
        if not Path(path).is_file():
            raise UsageError(f"{flag}: file not found: {path}")
    graph = args.graph_path
    tmp = None
    if graph is None:
        if getattr(args, "spatial", None) == "besag-proper":
            raise UsageError("--graph is required with --spatial besag-proper")
        tmp = _single_region_graph(args)
        graph = tmp
    elif not Path(graph).is_file():
        flag = "--graph (needed by --spatial besag-proper)" if getattr(args, "spatial", None) == "besag-proper" else "--graph"
        raise UsageError(f"{flag}: file not found: {graph}")
    try:
        return load_dataset(args.long_path, args.surv_path, graph, _csv_list(args.long_covariates),
                            _csv_list(args.surv_covariates), strict=args.validate_strict, clamp=args.clamp_times)
    finally:
        if tmp:
            os.unlink(tmp)


def _single_region_graph(args) -> str:
    import tempfile

    regions = set()
    with open(args.surv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            regions.add(int(row["region"]))
    K = max(regions) + 1 if regions else 1
    fd, path = tempfile.mkstemp(suffix=".graph")
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{K}\n")
    return path


def _spec_from_args(args, name=None):
    from .model import ModelSpec, preset, read_model_config

    name = name or args.model
    kw = {}
    deg = str(args.spline_degree).lower()
    kw["spline_degree"] = None if deg == "none" else int(deg)
    kw["spline_nknots"] = args.spline_nknots
    kw["spline_knots"] = _float_list(args.spline_knots)
    kw["long_covariates"] = _csv_list(args.long_covariates)
    kw["surv_covariates"] = _csv_list(args.surv_covariates)
    if args.zeta is not None:
        if args.zeta == "estimate":
            kw["zeta"] = None
        else:
            try:
                kw["zeta"] = float(args.zeta)
            except ValueError:
                raise UsageError(f"--zeta: expected a number or 'estimate', got {args.zeta!r}") from None
    from dataclasses import replace

    over = {}
    if getattr(args, "model_config", None) and name == args.model:
        if not Path(args.model_config).is_file():
            raise UsageError(f"--model-config: file not found: {args.model_config}")
        spec = read_model_config(args.model_config)
        # flags without a default (covariates, knots, zeta) override the file
        over.update({k: kw[k] for k in ("long_covariates", "surv_covariates", "spline_knots") if kw[k] is not None})
        if args.zeta is not None:
            over["zeta"] = kw["zeta"]
    elif name == "custom":
        spec = ModelSpec(name="custom", **kw)
    else:
        spec = preset(name, **kw)
    if args.random_effects:
        over["random_effects"] = args.random_effects
    if args.linkage:
        over["linkage"] = args.linkage
    if args.spatial:
        over["spatial"] = args.spatial == "besag-proper"
    if args.car_form:
        over["car_form"] = args.car_form
    if over:
        spec = replace(spec, **over)
    return spec


def _options(args, **extra):
    from .inference import InferenceOptions

    return InferenceOptions(strategy=args.strategy, correction=getattr(args, "correction", "gaussian"),
                            threads=max(1, args.threads), **extra)


def _fit_outputs(result, out_json: Path, out_dir: Path, man: Manifest) -> None:
    result.to_json(out_json)
    man.outputs.append(out_json)
    rows = []
    lat = result.latent
    for i, n in enumerate(lat["name"]):
        rows.append([n, lat["mean"][i], lat["sd"][i], lat["q025"][i], lat["q975"][i], lat["q50"][i]])
    p = out_dir / "latent_summary.csv"
    write_csv(p, ["coordinate", "mean", "sd", "q025", "q975", "median"], rows)
    man.outputs.append(p)
    p = out_dir / "hyper_summary.csv"
    write_csv(p, ["parameter", "scale", "mean", "sd", "q025", "q975", "median"],
              [[h["label"], h["scale"], h["mean"], h["sd"], h["q025"], h["q975"], h["q50"]] for h in result.hyper])
    man.outputs.append(p)
    p = out_dir / "densities.csv"
    rows = []
    for name, (x, d) in list(result.latent_densities.items()) + list(result.hyper_densities.items()):
        rows += [[name, xi, di] for xi, di in zip(x, d)]
    write_csv(p, ["coordinate", "abscissa", "density"], rows)
    man.outputs.append(p)


def _resolve_out(out: str) -> tuple[Path, Path]:
    o = Path(out)
    if o.suffix == ".json":
        o.parent.mkdir(parents=True, exist_ok=True)
        return o, o.parent
    o.mkdir(parents=True, exist_ok=True)
    return o / "result.json", o


# -- commands -----------------------------------------------------------------------

def cmd_fit(args, argv) -> int:
    from .criteria import attach_criteria
    from .inference import fit

    man = Manifest(argv, args)
    data = _load(args)
    man.stage("load")
    spec = _spec_from_args(args)
    if spec.has_spatial and args.graph_path is None:
        raise UsageError(f"--graph is required for model {spec.name} (spatial effect)")
    result = fit(spec, data, _options(args))
    man.stage("fit")
    if args.criteria_samples:
        attach_criteria(result, args.criteria_samples, args.seed)
        man.stage("criteria")
    out_json, out_dir = _resolve_out(args.out)
    _fit_outputs(result, out_json, out_dir, man)
    man.stage("write")
    man.write(out_dir)
    _print_table(result)
    return 0


def _print_table(result) -> None:
    print(f"{'parameter':<24}{'Mean':>12}{'SD':>12}{'2.5%':>12}{'97.5%':>12}{'Median':>12}")
    lat = result.latent
    for i, n in enumerate(lat["name"]):
        if n.startswith(("b0[", "b1[", "nu[")):
            continue
        print(f"{n:<24}{lat['mean'][i]:>12.4f}{lat['sd'][i]:>12.4f}{lat['q025'][i]:>12.4f}{lat['q975'][i]:>12.4f}{lat['q50'][i]:>12.4f}")
    for h in result.hyper:
        if h["scale"] == "internal":
            continue
        print(f"{h['label']:<24}{h['mean']:>12.4f}{h['sd']:>12.4f}{h['q025']:>12.4f}{h['q975']:>12.4f}{h['q50']:>12.4f}")
    if result.criteria:
        c = result.criteria
        print(f"DIC {c['dic']:.2f} (pD {c['pd']:.2f})  WAIC {c['waic']:.2f} (pWAIC {c['pwaic']:.2f})")


def cmd_compare(args, argv) -> int:
    from .criteria import compute_criteria
    from .inference import fit

    man = Manifest(argv, args)
    data = _load(args)
    man.stage("load")
    rows = []
    for name in _csv_list(args.models) or ():
        spec = _spec_from_args(args, name)
        if spec.has_spatial and args.graph_path is None:
            raise UsageError(f"--graph is required for model {name} (spatial effect)")
        r = fit(spec, data, _options(args, densities="none"))
        c = compute_criteria(r, None, max(args.criteria_samples, 100), args.seed)
        rows.append([name, c.dic, c.pd, c.waic, c.pwaic])
        man.stage(f"model {name}")
        print(f"{name:<6} DIC {c.dic:12.2f} pD {c.pd:9.2f} WAIC {c.waic:12.2f} pWAIC {c.pwaic:9.2f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ["model", "dic", "pd", "waic", "pwaic"], rows)
    man.outputs.append(out)
    man.write(out.parent)
    return 0


def cmd_simulate(args, argv) -> int:
    from .inference import InferenceOptions
    from .simulation import reference_comparison, run_study, scenario

    man = Manifest(argv, args)
    over = {"n_k": args.nk, "seed": args.seed, "spline_nknots": args.spline_nknots}
    if args.K is not None:
        over["K"] = args.K
    if args.graph_path:
        over.update(graph_source="file", graph_path=args.graph_path)
    cfg = scenario(args.scenario, **over)
    opts = InferenceOptions(strategy=args.strategy, threads=1, densities="none")
    models = _csv_list(args.models) or (("IV",) if args.scenario == "3" else ("I", "II", "III", "IV"))
    report = run_study(cfg, models, args.M, opts, criteria=args.criteria_samples > 0,
                       samples=max(args.criteria_samples, 100), keep_data=args.keep_data, threads=max(1, args.threads))
    man.stage("study")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "scores.csv"
    write_csv(p, ["model", "parameter", "real", "est", "se", "rbias", "rmse", "n", "flag"],
              [[r.model, r.parameter, r.truth, r.est, r.se, r.rbias, r.rmse, r.n, r.flag] for r in report.scores()])
    man.outputs.append(p)
    p = out / "timing.csv"
    rows = []
    for m in report.models:
        t = np.array(report.timing[m])
        rows.append([m, float(t.mean()), float(t.std(ddof=1)) if t.size > 1 else 0.0, len(report.failures[m])])
    write_csv(p, ["model", "mean_seconds", "sd_seconds", "failures"], rows)
    # timing varies run to run; it is kept out of the reproducibility hashes
    if args.scenario == "3" and "IV" in report.models:
        write_csv(out / "reference.csv",
                  ["parameter", "real", "est", "se", "rbias", "rmse",
                   "gibbs_ref_est", "gibbs_ref_se", "gibbs_ref_rbias", "gibbs_ref_rmse"],
                  reference_comparison(report, "IV"))
    p = out / "criteria.csv"
    rows = []
    for m in report.models:
        for rep, c in enumerate(report.criteria[m]):
            if c:
                rows.append([m, rep, c["dic"], c["pd"], c["waic"], c["pwaic"]])
    write_csv(p, ["model", "rep", "dic", "pd", "waic", "pwaic"], rows)
    man.outputs.append(p)
    p = out / "estimates.csv"
    rows = []
    for m in report.models:
        for rep, e in enumerate(report.estimates[m]):
            for k, v in (e or {}).items():
                rows.append([m, rep, k, v])
    write_csv(p, ["model", "rep", "parameter", "estimate"], rows)
    man.outputs.append(p)
    p = out / "censoring.csv"
    write_csv(p, ["rep", "censoring"], list(enumerate(report.censoring)))
    man.outputs.append(p)
    if args.keep_data:
        from .data import write_dataset

        for rep, d in enumerate(report.datasets):
            dd = out / f"rep{rep:04d}"
            dd.mkdir(exist_ok=True)
            write_dataset(d, dd / "longitudinal.csv", dd / "survival.csv", dd / "graph.txt")
    for m in report.models:
        for rep, msg in report.failures[m]:
            print(f"warning: model {m} replication {rep} failed: {msg}", file=sys.stderr)
    man.write(out)
    for r in report.scores():
        print(f"{r.model:<4}{r.parameter:<20}{r.truth:>9.3f}{r.est:>10.3f}{r.se:>9.3f}{r.rbias:>9.3f}{r.rmse:>9.3f}")
    return 0


def cmd_diagnose(args, argv) -> int:
    from .diagnostics import cox_snell_residuals, kaplan_meier, predict_subject, region_risk, standardized_marginal_residuals
    from .inference import FitResult

    if not Path(args.fit_path).is_file():
        raise UsageError(f"--fit: fit output not found: {args.fit_path} (run 'sjlgm fit' first)")
    man = Manifest(argv, args)
    data = _load(args)
    result = FitResult.from_json(args.fit_path, data)
    man.stage("load")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if any(p.spec.has_long for p in result.parts):
        res = standardized_marginal_residuals(result)
        p = out / "residuals_long.csv"
        write_csv(p, ["subject", "time", "y", "residual"],
                  [[data.subject_ids[s], t, y, r] for s, t, y, r in zip(data.long_subject, data.long_time, data.long_y, res)])
        files.append(p)
    if any(p.spec.has_surv for p in result.parts):
        cs = cox_snell_residuals(result, samples=args.samples, seed=args.seed)
        p = out / "coxsnell.csv"
        write_csv(p, ["subject", "event", "residual"], [[s, e, r] for s, e, r in zip(data.subject_ids, cs.events, cs.residuals)])
        files.append(p)
        p = out / "coxsnell_km.csv"
        write_csv(p, ["residual", "km", "unit_exponential"], [[t, s, np.exp(-t)] for t, s in zip(cs.km.times, cs.km.survival)])
        files.append(p)
        km = kaplan_meier(data.surv_time, data.surv_event)
        p = out / "km.csv"
        write_csv(p, ["time", "survival", "at_risk", "events"], list(zip(km.times, km.survival, km.at_risk, km.events)))
        files.append(p)
        rr = region_risk(result)
        p = out / "region_risk.csv"
        write_csv(p, ["region", "n_subjects", "lambda_hat", "exp_nu"], list(zip(rr.region, rr.n_subjects, rr.lambda_hat, rr.exp_nu)))
        files.append(p)
        print(f"Cox-Snell sup-distance to exp(-t): {cs.sup_distance:.4f}")
    subjects = _csv_list(args.subjects) or (data.subject_ids[0],)
    tmax = float(np.max(data.surv_time)) if data.has_survival else float(np.max(data.long_time))
    horizon = np.linspace(0.0, tmax, args.horizon)
    for sid in subjects:
        pr = predict_subject(result, data, sid, horizon, args.samples, args.seed)
        p = out / f"predict_{sid}.csv"
        write_csv(p, ["time", "traj_mean", "traj_q025", "traj_q975", "surv_median", "surv_q025", "surv_q975"],
                  list(zip(pr.times, pr.traj_mean, pr.traj_lo, pr.traj_hi, pr.surv_median, pr.surv_lo, pr.surv_hi)))
        files.append(p)
    man.outputs += files
    man.stage("diagnostics")
    man.write(out)
    return 0


def cmd_validate(args, argv) -> int:
    from .data import summarize_dataset

    data = _load(args)
    s = summarize_dataset(data)
    for k, v in vars(s).items():
        print(f"{k}: {v}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        man = Manifest(argv, args)
        p = out / "summary.json"
        with open(p, "w") as fh:
            json.dump(vars(s), fh, indent=1, sort_keys=True)
            fh.write("\n")
        man.outputs.append(p)
        man.write(out)
    return 0


def cmd_rerun(args, argv) -> int:
    with open(args.manifest) as fh:
        doc = json.load(fh)
    cmd = list(doc["command"])
    if args.threads is not None:
        cmd = _replace_flag(cmd, "--threads", str(args.threads))
    if args.out is not None:
        cmd = _replace_flag(cmd, "--out", args.out)
    return main(cmd)


def _replace_flag(cmd, flag, value):
    out, i, done = [], 0, False
    while i < len(cmd):
        tok = cmd[i]
        if tok == flag:
            out += [flag, value]
            i += 2
            done = True
            continue
        if tok.startswith(flag + "="):
            out.append(f"{flag}={value}")
            done = True
        else:
            out.append(tok)
        i += 1
    if not done:
        out += [flag, value]
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args, argv) or 0)
    except UsageError as e:
        print(f"sjlgm {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - reported with the failing stage
        from .data import DataError

        kind = "data error" if isinstance(e, DataError) else "error"
        print(f"sjlgm {args.command}: {kind}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
