"""Command-line front end: analyze, simulate, batch, d-measure and rerun."""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .analysis import AnalysisResult, analyze
from .bias_measure import CATEGORIES, compute_d_measure
from .data import DataError, read_dataset, serialize_dataset
from .model_selection import dic_table_csv
from .sampler import PARAMS, Chain, SamplerConfig
from .simulation import EFFECTS, METHODS, SELECTED, SimConfig, SimulationError, \
    results_csv, run_experiment

EXIT_OK, EXIT_DATA, EXIT_DIAG = 0, 2, 3
MANIFEST = "manifest.txt"
SEED_ENV = "RBCOPAS_SEED"
FAMILY_CHOICES = ("auto", "normal", "laplace", "t", "slash")

# (flag, dest, type, default, help); type None marks an on/off switch
_SAMPLER_OPTS = [
    ("--iters", "iters", int, 20_000, "total iterations per chain"),
    ("--burnin", "burnin", int, 10_000, "burn-in iterations discarded per chain"),
    ("--chains", "chains", int, 4, "number of chains"),
    ("--seed", "seed", int, None, f"base seed (default: ${SEED_ENV}, else 0)"),
]
_FIT_OPTS = [
    ("--family", "family", str, "auto", "effects family, or auto to select by DIC"),
    ("--df", "df", float, 4.0, "degrees of freedom of the t family"),
    ("--shape", "shape", float, 1.0, "shape of the slash family"),
]
_OPTIONS = {
    "analyze": _FIT_OPTS + _SAMPLER_OPTS + [
        ("--rho-fixed-zero", "rho_fixed_zero", None, False, "fit with rho pinned at zero"),
        ("--tau-measure", "tau_measure", None, False, "also report D for tau"),
        ("--emit-grids", "emit_grids", None, False, "write the two posterior density grids"),
        ("--emit-chains", "emit_chains", None, False, "write every chain as CSV"),
    ],
    "simulate": [
        ("--effects", "effects", str, "std_normal", f"one of {', '.join(EFFECTS)}"),
        ("--rho", "rho", float, 0.0, "true correlation"),
        ("--reps", "reps", int, 100, "number of replicates"),
        ("--methods", "methods", str, ",".join(METHODS), "comma-separated methods"),
        ("--no-d", "no_d", None, False, "skip DIC selection and the D measure"),
        ("--keep-data", "keep_data", None, False, "write each simulated dataset"),
        ("--spread-is-sd", "spread_is_sd", None, False,
         "read mixture spreads as standard deviations"),
    ] + [o if o[1] != "chains" else ("--chains", "chains", int, 2, "number of chains")
         for o in _SAMPLER_OPTS],
    "batch": _FIT_OPTS + _SAMPLER_OPTS + [
        ("--jobs", "jobs", int, 1, "files analysed concurrently"),
        ("--fast", "fast", None, False, "halve iterations and burn-in"),
    ],
    "d-measure": [
        ("--emit-grids", "emit_grids", None, False, "write the two posterior density grids"),
        ("--param", "param", str, "theta", "parameter column to compare"),
    ],
}
_POSITIONAL = {"analyze": ["input"], "simulate": [], "batch": ["input"],
               "d-measure": ["rbc_chain", "rho0_chain"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbcopas", description=(
        "Robust Bayesian Copas selection model for publication bias in meta-analysis."))
    parser.add_argument("--version", action="version", version=f"rbcopas {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in _OPTIONS.items():
        p = sub.add_parser(name)
        for pos in _POSITIONAL[name]:
            p.add_argument(pos)
        p.add_argument("--out", required=True, help="output directory")
        for flag, dest, typ, default, help_ in opts:
            if typ is None:
                p.add_argument(flag, dest=dest, action="store_true", help=help_)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=default, help=help_)
    rerun = sub.add_parser("rerun", help="repeat a run from its manifest")
    rerun.add_argument("manifest")
    rerun.add_argument("--out", help="output directory (default: the recorded one)")
    return parser


def resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise DataError(f"${SEED_ENV} must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# output helpers


class Output:
    """Single writer for one output directory; records every file it writes."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def write(self, name: str, text: str):
        target = self.root / name
        if target.resolve().parent != self.root.resolve():
            raise ValueError(f"refusing to write {name!r} outside the output directory")
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.files.append(name)


def _kv(rows) -> str:
    out = []
    for k, v in rows:
        text = str(v).replace("\n", " ")
        out.append(f"{k}={text}\n")
    return "".join(out)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(out: Output, args, exit_code, warnings, notes, started):
    rows = [("command", args.command), ("tool_version", __version__)]
    for pos in _POSITIONAL[args.command]:
        rows.append((f"input.{pos}", os.path.abspath(getattr(args, pos))))
    rows.append(("out", os.path.abspath(args.out)))
    for _, dest, _, _, _ in _OPTIONS[args.command]:
        rows.append((f"option.{dest}", _fmt(getattr(args, dest))))
    rows.append(("warnings", "; ".join(warnings) if warnings else "none"))
    rows.append(("notes", "; ".join(notes) if notes else "none"))
    rows.append(("outputs", ",".join(sorted(out.files))))
    rows.append(("exit_code", exit_code))
    rows.append(("duration_seconds", f"{time.monotonic() - started:.3f}"))
    out.write(MANIFEST, _kv(rows))


def read_manifest(path) -> dict:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            rows[key] = value
    return rows


def manifest_argv(rows: dict, out: str | None = None) -> list[str]:
    """Rebuild the command line recorded in a manifest."""
    command = rows["command"]
    if command not in _OPTIONS:
        raise DataError(f"manifest names unknown command {command!r}")
    argv = [command] + [rows[f"input.{pos}"] for pos in _POSITIONAL[command]]
    argv += ["--out", out or rows["out"]]
    for flag, dest, typ, _, _ in _OPTIONS[command]:
        value = rows.get(f"option.{dest}")
        if value is None:
            raise DataError(f"manifest lacks option {dest!r}")
        if typ is None:
            if value == "True":
                argv.append(flag)
        elif value != "None":
            argv += [flag, value]
    return argv


# ---------------------------------------------------------------------------
# analyze


def _sampler_config(args, fast=False) -> SamplerConfig:
    iters, burn = args.iters, args.burnin
    if fast:
        iters, burn = iters // 2, burn // 2
    return SamplerConfig(n_iter=iters, burn_in=burn, n_chains=args.chains, seed=args.seed)


def _family_arg(args):
    fam = args.family
    if fam not in FAMILY_CHOICES:
        raise DataError(f"unknown family {fam!r}; choose from {', '.join(FAMILY_CHOICES)}")
    return "student_t" if fam == "t" else fam


def _summary_csv(summaries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = ["param", "point", "mean", "median", "sd", "ci_low", "ci_high"]
    writer.writerow(cols)
    for p in PARAMS:
        row = summaries[p].as_row()
        writer.writerow([row["param"]] + [repr(float(row[c])) for c in cols[1:]])
    return buf.getvalue()


def _diagnostics_text(res: AnalysisResult) -> str:
    diag = res.diagnostics
    rows = [("family", res.selected.label), ("rhat_threshold", diag.threshold)]
    for p in PARAMS:
        rows.append((f"rhat.{p}", _fmt(float(diag.rhat[p]))))
        rows.append((f"ess.{p}", _fmt(float(diag.ess[p]))))
    for fit_name, fit in (("rbc", res.selected_fit), ("rho0", res.fit_rho0)):
        if fit is None:
            continue
        for c in fit.chains:
            for block, rate in c.acceptance_rates.items():
                rows.append((f"acceptance.{fit_name}.chain{c.chain_id}.{block}", _fmt(rate)))
    rows.append(("flagged", ",".join(diag.flagged) if diag.flagged else "none"))
    rows.append(("ok", diag.ok))
    return _kv(rows)


def _direction_text(res: AnalysisResult) -> str:
    if res.direction is None:
        return _kv([("available", False)])
    dr = res.direction
    meaning = {1: "excess of large effects", -1: "excess of small effects", 0: "symmetric"}
    return _kv([("available", True), ("theta_hat", _fmt(res.sma.theta_hat)),
                ("tau_hat", _fmt(res.sma.tau_hat)), ("skewness", _fmt(dr.skewness)),
                ("direction", dr.direction), ("reading", meaning[dr.direction]),
                ("deviates", " ".join(repr(float(v)) for v in dr.deviates))])


def _run_analysis(d, args, cfg):
    family = _family_arg(args)
    if args.rho_fixed_zero:
        return _run_rho0_only(d, args, cfg, family)
    return analyze(d, family=family, cfg=cfg, nu=args.df, xi=args.shape,
                   tau_measure=getattr(args, "tau_measure", False))


def _run_rho0_only(d, args, cfg, family):
    # the rho = 0 model alone: no DIC selection and no D measure
    from .analysis import fit_rbc
    from .data import validate
    from .distributions import EffectsFamily
    from .model_selection import compute_dic
    from .sampler import diagnostics
    if family == "auto":
        family = "normal"
    fam = EffectsFamily(family, nu=args.df, xi=args.shape)
    fit = fit_rbc(d, fam, cfg, rho_fixed_zero=True)
    return AnalysisResult(validation=validate(d), fits={fam.kind: fit},
                          dic=[compute_dic(fit.chains, d, fam)], selected=fam, fit_rho0=None,
                          d_report=None, diagnostics=diagnostics(fit.chains),
                          notes=["rho fixed at zero: D measure not computed"])


def cmd_analyze(args, out: Output):
    d = read_dataset(args.input)
    cfg = _sampler_config(args)
    res = _run_analysis(d, args, cfg)
    out.write("dic.csv", dic_table_csv(res.dic))
    out.write("summary.csv", _summary_csv(res.summaries()))
    out.write("diagnostics.txt", _diagnostics_text(res))
    if res.d_report is not None:
        out.write("d_report.txt", res.d_report.to_text())
        if args.emit_grids:
            out.write("grid_rbc.csv", res.d_report.grid_rbc.to_csv())
            out.write("grid_rho0.csv", res.d_report.grid_rho0.to_csv())
    if res.d_report_tau is not None:
        out.write("d_report_tau.txt", res.d_report_tau.to_text())
    if not args.rho_fixed_zero:
        out.write("direction.txt", _direction_text(res))
    if args.emit_chains:
        for kind, fit in res.fits.items():
            tag = f"{kind}_rho0" if fit.rho_fixed_zero else kind
            for c in fit.chains:
                out.write(f"chain_{tag}_{c.chain_id + 1}.csv", c.to_csv())
        if res.fit_rho0 is not None:
            for c in res.fit_rho0.chains:
                out.write(f"chain_{res.selected.kind}_rho0_{c.chain_id + 1}.csv", c.to_csv())
    code = EXIT_OK if res.diagnostics.ok else EXIT_DIAG
    notes = list(res.notes)
    notes.append(f"selected family {res.selected.label}")
    if code == EXIT_DIAG:
        notes.append(f"R-hat above threshold for {', '.join(res.diagnostics.flagged)}")
    return code, res.validation.warnings, notes


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args, out: Output):
    if args.effects not in EFFECTS:
        raise DataError(f"unknown effects {args.effects!r}; choose from {', '.join(EFFECTS)}")
    if not abs(args.rho) < 1:
        raise DataError(f"rho must lie in (-1, 1), got {args.rho}")
    if args.reps < 1:
        raise DataError("reps must be >= 1")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS and m != SELECTED:
            raise DataError(f"unknown method {m!r}")
    kept = [] if args.keep_data else None
    results = run_experiment(args.effects, args.rho, reps=args.reps, methods=methods,
                             seed=args.seed, sampler=_sampler_config(args),
                             with_d=not args.no_d, spread_is_sd=args.spread_is_sd,
                             base=SimConfig(), keep_data=kept)
    out.write("results.csv", results_csv(results))
    notes = []
    for r in results:
        if r.winners:
            notes.append("DIC winners " + ",".join(f"{k}:{v}" for k, v in r.winners.items()))
    if kept is not None:
        width = len(str(len(kept)))
        for i, d in enumerate(kept, start=1):
            out.write(f"data_rep{i:0{width}d}.csv", serialize_dataset(d))
    return EXIT_OK, [], notes


# ---------------------------------------------------------------------------
# batch

_BATCH_COLS = ["file", "status", "n", "family", "theta_mean", "theta_ci_low", "theta_ci_high",
               "rho_median", "d", "category", "error"]


def _batch_one(path, family, nu, xi, cfg):
    row = dict.fromkeys(_BATCH_COLS, "")
    row["file"] = os.path.basename(path)
    try:
        d = read_dataset(path)
        res = analyze(d, family=family, cfg=cfg, nu=nu, xi=xi)
        th = res.selected_fit.summary("theta")
        if res.d_report is None:
            raise ValueError("; ".join(res.notes))
        row.update(status="ok" if res.diagnostics.ok else "rhat_flagged", n=d.n,
                   family=res.selected.kind, theta_mean=repr(th.mean),
                   theta_ci_low=repr(th.ci95[0]), theta_ci_high=repr(th.ci95[1]),
                   rho_median=repr(res.selected_fit.summary("rho").median),
                   d=repr(res.d_report.d), category=res.d_report.category)
    except Exception as exc:  # isolated per file
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_batch(args, out: Output):
    root = Path(args.input)
    if not root.is_dir():
        raise DataError(f"{args.input} is not a directory")
    files = sorted(str(p) for p in root.iterdir() if p.suffix.lower() == ".csv" and p.is_file())
    if not files:
        raise DataError(f"no CSV files in {args.input}")
    family = _family_arg(args)
    cfg = _sampler_config(args, fast=args.fast)
    jobs = max(1, args.jobs)
    if jobs == 1:
        rows = [_batch_one(f, family, args.df, args.shape, cfg) for f in files]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_batch_one, files, [family] * len(files),
                                 [args.df] * len(files), [args.shape] * len(files),
                                 [cfg] * len(files)))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_BATCH_COLS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    out.write("batch.csv", buf.getvalue())

    cats = [r["category"] for r in rows if r["category"]]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "count", "proportion"])
    for c in CATEGORIES:
        k = cats.count(c)
        writer.writerow([c, k, repr(k / len(cats)) if cats else "nan"])
    out.write("categories.csv", buf.getvalue())
    notes = [f"{sum(r['status'] == 'error' for r in rows)} of {len(rows)} files failed"]
    if args.fast:
        notes.append(f"fast mode: {cfg.n_iter} iterations with {cfg.burn_in} burn-in")
    return EXIT_OK, [], notes


# ---------------------------------------------------------------------------
# d-measure


def cmd_d_measure(args, out: Output):
    if args.param not in PARAMS:
        raise DataError(f"unknown parameter {args.param!r}")
    draws = []
    for path in (args.rbc_chain, args.rho0_chain):
        with open(path, encoding="utf-8") as fh:
            try:
                draws.append(Chain.from_csv(fh.read()).param(args.param))
            except (ValueError, IndexError, KeyError) as exc:
                raise DataError(f"{path}: not a chain CSV ({exc})") from None
    try:
        rep = compute_d_measure(draws[0], draws[1], param=args.param)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out.write("d_report.txt", rep.to_text())
    if args.emit_grids:
        out.write("grid_rbc.csv", rep.grid_rbc.to_csv())
        out.write("grid_rho0.csv", rep.grid_rho0.to_csv())
    return EXIT_OK, [], []


_COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "batch": cmd_batch,
             "d-measure": cmd_d_measure}


def run(args) -> int:
    started = time.monotonic()
    out = Output(args.out)
    warnings, notes = [], []
    try:
        if hasattr(args, "seed"):
            args.seed = resolve_seed(args.seed)
        code, warnings, notes = _COMMANDS[args.command](args, out)
    except (DataError, SimulationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"rbcopas {args.command}: {exc}", file=sys.stderr)
        code, notes = EXIT_DATA, [f"error: {exc}"]
    write_manifest(out, args, code, warnings, notes, started)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "rerun":
        rows = read_manifest(args.manifest)
        args = parser.parse_args(manifest_argv(rows, args.out))
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
