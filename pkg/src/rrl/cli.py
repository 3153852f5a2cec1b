"""``rrl`` command line: estimation, model fits, forecasts and the simulation study.

Every command writes into ``--out`` a ``manifest.json`` recording the
command, its arguments (minus ``--out``), input file digests, the resolved
configuration and the toolkit version; ``rrl replay`` re-runs it. Warnings
are emitted as JSON lines on stderr; ``--strict`` turns them into a
nonzero exit status.

File formats
------------
panel, long form     header ``period,from,to,count``
panel, per period    header ``from,<grade labels>``; one file per period,
                     period label taken from the file name stem
macro / scenario     header ``period,<var1>,...,<varn>``
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .domain import (
    DataError,
    TransitionPanel,
    average_matrix,
    normalize_rows,
    read_macro_csv,
    read_panel_long_csv,
    read_period_csv,
    validate_panel,
)
from .macrorisk import FitError, MacroRiskFit, fit_regression, forecast_pd, predict_matrices, probit_transform
from .numerics import ClipPolicy, ConvergenceError
from .onefactor import (
    OneFactorFit,
    basel_rho,
    calibrate_rho_variance,
    fit_onefactor,
)
from .simlab import SimulationConfig, fmt, run_comparison, summary_json, synthetic_history

log = logging.getLogger("rrl")

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 2, 3


class UsageError(Exception):
    pass


class _JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()}, sort_keys=True)


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value) -> None:
        pass


def _setup_logging() -> None:
    root = logging.getLogger("rrl")
    if not any(isinstance(h, _StderrHandler) for h in root.handlers):
        h = _StderrHandler()
        h.setFormatter(_JsonLines())
        root.addHandler(h)
    root.setLevel(logging.INFO)
    root.propagate = False


# --- io helpers -----------------------------------------------------------

def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv(rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def load_panel(paths: Sequence[str], units: str = "auto") -> tuple[TransitionPanel, list[np.ndarray]]:
    """Load a long-format file or a set of per-period files.

    Returns the panel and, for per-period files, the raw tables as printed.
    """
    if not paths:
        raise UsageError("no panel file given")
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"panel file {p!r} not found")
        if not Path(p).read_text().strip():
            raise UsageError(f"panel file {p!r} is empty")
    first = Path(paths[0]).read_text().lstrip().split("\n", 1)[0].strip().lower()
    if first.replace(" ", "") == "period,from,to,count":
        if len(paths) > 1:
            raise UsageError("give a single long-format panel file")
        return read_panel_long_csv(paths[0]), []
    scale = None
    obs, raws = [], []
    for p in paths:
        scale, raw, o = read_period_csv(p, Path(p).stem, units, scale)
        obs.append(o)
        raws.append(raw)
    return TransitionPanel(scale, tuple(obs)), raws


def matrices_csv(periods: Sequence[str], scale, mats: np.ndarray) -> str:
    rows: list[list[Any]] = [["period", "from", *scale.labels]]
    for p, m in zip(periods, mats):
        for g, row in zip(scale.initial_labels, m):
            rows.append([p, g, *[float(v) for v in row]])
    return _csv(rows)


# --- manifest -------------------------------------------------------------

def manifest(command: str, args: dict, inputs: Sequence[str], config: dict | None = None,
             seed: int | None = None) -> dict:
    return {
        "command": command,
        "args": args,
        "inputs": {str(p): sha256(p) for p in inputs},
        "config": config or {},
        "version": __version__,
        "seed": seed,
    }


def _replay_args(ns: argparse.Namespace) -> dict:
    skip = {"out", "func", "command"}
    return {k: v for k, v in sorted(vars(ns).items()) if k not in skip}


# --- commands -------------------------------------------------------------

def cmd_estimate(ns: argparse.Namespace) -> dict:
    panel, _ = load_panel(ns.panel, ns.units)
    policy = ClipPolicy(ns.epsilon)
    report = validate_panel(panel, policy)
    out = Path(ns.out)
    write_text(out / "empirical.csv", matrices_csv(panel.periods, panel.scale, panel.matrices()))
    write_text(out / "validation.json", dump_json(report.to_dict()))
    log.info("estimated %d periods; %d unobserved rows, %d zero cells, %d rounding defects",
             len(panel), len(report.unobserved_rows), len(report.zero_cells),
             len(report.rounding_defects))
    return manifest("estimate", _replay_args(ns), ns.panel, {"epsilon": ns.epsilon})


def _onefactor_doc(fit: OneFactorFit, panel: TransitionPanel, source: str) -> dict:
    labels = panel.scale.initial_labels
    rho = fit.rho
    if np.ndim(rho) == 0:
        rho_doc: Any = float(rho)
    else:
        rho_doc = {g: float(r) for g, r in zip(labels, rho)}
    return {
        "model": "onefactor",
        "scale": list(panel.scale.labels),
        "coefficients": {"rho": rho_doc, "rho_source": source},
        "thresholds": {g: ([float(v) for v in fit.thresholds.values[i]] if fit.thresholds.active[i] else None)
                       for i, g in enumerate(labels)},
        "warnings": list(fit.warnings),
    }


def cmd_fit_onefactor(ns: argparse.Namespace) -> dict:
    panel, _ = load_panel(ns.panel, ns.units)
    policy = ClipPolicy(ns.epsilon)
    if ns.rho == "fixed":
        if ns.rho_value is None:
            raise UsageError("--rho fixed needs --rho-value")
        fit = fit_onefactor(panel, ns.rho_value, policy)
    elif ns.rho == "basel":
        pd = normalize_rows(average_matrix(panel))[:, -1]
        fit = fit_onefactor(panel, basel_rho(pd), policy)
    else:
        _, fit = calibrate_rho_variance(panel, policy)
    out = Path(ns.out)
    z = fit.presented_z(ns.flip_sign)
    write_text(out / "z_series.csv",
               _csv([["period", "z", "objective"]]
                    + [[p, float(v), float(o)] for p, v, o in zip(fit.periods, z, fit.objective_values)]))
    doc = _onefactor_doc(fit, panel, ns.rho)
    doc["coefficients"]["z_sign"] = "flipped" if ns.flip_sign else "downgrade_pressure"
    man = manifest("fit-onefactor", _replay_args(ns), ns.panel, {"epsilon": ns.epsilon, "rho": ns.rho})
    doc["manifest"] = man
    write_text(out / "fit.json", dump_json(doc))
    return man


def cmd_fit_macrorisk(ns: argparse.Namespace) -> dict:
    panel, _ = load_panel(ns.panel, ns.units)
    macro = read_macro_csv(ns.macro)
    policy = ClipPolicy(ns.epsilon)
    probit = probit_transform(panel, policy, ns.zero_tail)
    unobserved = int((~probit.observed).sum())
    clipped = int(probit.clipped.sum())
    log.info("probit panel: %d unobserved rows masked, %d clipped entries masked", unobserved, clipped)
    fit = fit_regression(probit, macro)
    for w in fit.warnings:
        if "not strictly increasing" in w or "clipped" in w:
            warnings.warn(w, UserWarning)
    mats = predict_matrices(fit, macro.aligned(panel.periods))
    out = Path(ns.out)
    write_text(out / "fitted_matrices.csv", matrices_csv(panel.periods, panel.scale, mats))
    doc = fit.to_dict()
    doc["masking"] = {"unobserved_rows": unobserved, "clipped_entries": clipped, "zero_tail": ns.zero_tail}
    man = manifest("fit-macrorisk", _replay_args(ns), [*ns.panel, ns.macro],
                   {"epsilon": ns.epsilon, "zero_tail": ns.zero_tail})
    doc["manifest"] = man
    write_text(out / "fit.json", dump_json(doc))
    return man


def cmd_forecast(ns: argparse.Namespace) -> dict:
    doc = json.loads(Path(ns.fit).read_text())
    if doc.get("model") != "macrorisk":
        raise DataError("forecast needs a macro-risk fit (model = 'macrorisk')")
    fit = MacroRiskFit.from_dict(doc)
    scenario = read_macro_csv(ns.scenario)
    pd = forecast_pd(fit, scenario)
    rows: list[list[Any]] = [["period", "grade", "pd"]]
    for p, row in zip(scenario.periods, pd):
        for i, g in enumerate(fit.scale.initial_labels):
            if fit.active[i]:
                rows.append([p, g, float(row[i])])
    write_text(Path(ns.out) / "pd_forecast.csv", _csv(rows))
    return manifest("forecast", _replay_args(ns), [ns.fit, ns.scenario])


def resolve_sim_config(ns: argparse.Namespace) -> SimulationConfig:
    """Defaults, then the config file, then ``RRL_SEED``, then explicit flags."""
    d: dict[str, Any] = {}
    if ns.config:
        d.update(json.loads(Path(ns.config).read_text()))
    env = os.environ.get("RRL_SEED")
    if env:
        d["seed"] = int(env)
    flag_map = {"seed": "seed", "replicates": "replicates", "noise_scale": "noise_scale",
                "rho_source": "rho_source", "rho_value": "rho", "count_sampling": "count_sampling",
                "epsilon": "epsilon", "macro_mode": "macro_mode", "zero_tail": "zero_tail"}
    for flag, key in flag_map.items():
        v = getattr(ns, flag, None)
        if v is not None:
            d[key] = v
    return SimulationConfig.from_dict(d)


def cmd_simulate(ns: argparse.Namespace) -> dict:
    cfg = resolve_sim_config(ns)
    inputs: list[str] = []
    if ns.panel:
        panel, _ = load_panel(ns.panel, ns.units)
        inputs += ns.panel
    else:
        panel = synthetic_history(cfg)
    macro = None
    if ns.macro:
        macro = read_macro_csv(ns.macro)
        inputs.append(ns.macro)
    if ns.config:
        inputs.append(ns.config)
    report = run_comparison(panel, macro, cfg, workers=ns.workers)
    out = Path(ns.out)
    args = _replay_args(ns)
    args.pop("workers", None)
    man = manifest("simulate", args, inputs, cfg.to_dict(), cfg.seed)
    write_text(out / "pd_trace.csv", report.pd_trace_csv())
    write_text(out / "mse_by_period.csv", report.mse_csv())
    write_text(out / "summary.json", summary_json(report, {"manifest": man}))
    for g in report.grade_summary():
        if g["active"]:
            log.info("grade %s: mean MSE one-factor %.4g, macro-risk %.4g",
                     g["grade"], g["mean_mse_onefactor"], g["mean_mse_new"])
    if report.failures:
        warnings.warn(f"{len(report.failures)} replicates failed", UserWarning)
    return man


def cmd_synth(ns: argparse.Namespace) -> dict:
    cfg = resolve_sim_config(ns)
    panel = synthetic_history(cfg)
    rows: list[list[Any]] = [["period", "from", "to", "count"]]
    for o in panel.observations:
        for i, g in enumerate(panel.scale.initial_labels):
            for j, h in enumerate(panel.scale.labels):
                rows.append([o.period, g, h, int(o.counts[i, j])])
    write_text(Path(ns.out) / "history.csv", _csv(rows))
    return manifest("synth", _replay_args(ns), [], cfg.to_dict(), cfg.seed)


def cmd_replay(ns: argparse.Namespace) -> dict:
    man = json.loads(Path(ns.manifest).read_text())
    if "manifest" in man and "command" not in man:
        man = man["manifest"]
    for p, digest in man.get("inputs", {}).items():
        if not Path(p).is_file() or sha256(p) != digest:
            raise DataError(f"input {p!r} is missing or changed since the manifest was written")
    if man.get("version") != __version__:
        log.warning("manifest written by version %s, replaying with %s", man.get("version"), __version__)
    argv = [man["command"], *_args_to_argv(man["command"], man["args"]), "--out", ns.out]
    parser = build_parser()
    sub = parser.parse_args(argv)
    return sub.func(sub)


def _args_to_argv(command: str, args: dict) -> list[str]:
    spec = _COMMANDS[command][1]
    out: list[str] = []
    for dest, (kind, flag) in spec.items():
        if dest not in args:
            continue
        v = args[dest]
        if kind == "pos":
            out += [str(x) for x in (v if isinstance(v, list) else [v])]
        elif kind == "bool":
            if v:
                out.append(flag)
        elif kind == "opt_list":
            if v:
                out += [flag, *[str(x) for x in v]]
        elif v is not None:
            out += [flag, str(v)]
    return out


# --- parser ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, units: bool = True, epsilon: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--strict", action="store_true", help="treat warnings as errors")
    if units:
        p.add_argument("--units", choices=["auto", "counts", "percent", "fraction"], default="auto",
                       help="units of per-period matrix files")
    if epsilon:
        p.add_argument("--epsilon", type=float, default=1e-6,
                       help="clipping level for probabilities fed to normal quantiles")


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with SimulationConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--noise-scale", type=float)
    p.add_argument("--rho-source", choices=["basel", "variance_search", "fixed"])
    p.add_argument("--rho-value", type=float)
    p.add_argument("--count-sampling", choices=["deterministic", "multinomial"])
    p.add_argument("--macro-mode", choices=["readout", "independent"])
    p.add_argument("--zero-tail", choices=["clip", "continuity"])
    p.add_argument("--epsilon", type=float)


# dest -> (kind, flag) so that manifests can be turned back into argv
_COMMANDS: dict[str, tuple[Callable, dict[str, tuple[str, str]]]] = {
    "estimate": (cmd_estimate, {"panel": ("pos", ""), "units": ("opt", "--units"),
                                "epsilon": ("opt", "--epsilon"), "strict": ("bool", "--strict")}),
    "fit-onefactor": (cmd_fit_onefactor, {
        "panel": ("pos", ""), "rho": ("opt", "--rho"), "rho_value": ("opt", "--rho-value"),
        "pd_from_history": ("bool", "--pd-from-history"), "flip_sign": ("bool", "--flip-sign"),
        "units": ("opt", "--units"), "epsilon": ("opt", "--epsilon"), "strict": ("bool", "--strict")}),
    "fit-macrorisk": (cmd_fit_macrorisk, {
        "panel": ("pos", ""), "macro": ("opt", "--macro"), "zero_tail": ("opt", "--zero-tail"),
        "units": ("opt", "--units"), "epsilon": ("opt", "--epsilon"), "strict": ("bool", "--strict")}),
    "forecast": (cmd_forecast, {"fit": ("pos", ""), "scenario": ("pos", ""), "strict": ("bool", "--strict")}),
    "simulate": (cmd_simulate, {
        "panel": ("opt_list", "--panel"), "macro": ("opt", "--macro"), "config": ("opt", "--config"),
        "seed": ("opt", "--seed"), "replicates": ("opt", "--replicates"),
        "noise_scale": ("opt", "--noise-scale"), "rho_source": ("opt", "--rho-source"),
        "rho_value": ("opt", "--rho-value"), "count_sampling": ("opt", "--count-sampling"),
        "macro_mode": ("opt", "--macro-mode"), "zero_tail": ("opt", "--zero-tail"),
        "epsilon": ("opt", "--epsilon"), "units": ("opt", "--units"), "strict": ("bool", "--strict")}),
    "synth": (cmd_synth, {"config": ("opt", "--config"), "seed": ("opt", "--seed"),
                          "strict": ("bool", "--strict")}),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"rrl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="cohort matrices and validation report")
    p.add_argument("panel", nargs="+")
    _common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fit-onefactor", help="thresholds, rho and Z_t of the one-factor model")
    p.add_argument("panel", nargs="+")
    p.add_argument("--rho", choices=["fixed", "basel", "search"], default="search")
    p.add_argument("--rho-value", type=float)
    p.add_argument("--pd-from-history", action="store_true",
                   help="with --rho basel: PD per grade from the historical average (the only source)")
    p.add_argument("--flip-sign", action="store_true", help="report -Z (upgrade pressure) instead of Z")
    _common(p)
    p.set_defaults(func=cmd_fit_onefactor)

    p = sub.add_parser("fit-macrorisk", help="probit regression of tail rates on macro variables")
    p.add_argument("panel", nargs="+")
    p.add_argument("--macro", required=True)
    p.add_argument("--zero-tail", choices=["clip", "continuity"], default="clip")
    _common(p)
    p.set_defaults(func=cmd_fit_macrorisk)

    p = sub.add_parser("forecast", help="PD under macro scenarios from a macro-risk fit")
    p.add_argument("fit")
    p.add_argument("scenario")
    _common(p, units=False, epsilon=False)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of the two estimators")
    p.add_argument("--panel", nargs="+", help="historical panel (default: synthetic history)")
    p.add_argument("--macro", help="macro CSV (default: noisy readouts of the true factor)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--units", choices=["auto", "counts", "percent", "fraction"], default="auto")
    _sim_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="write the synthetic history panel used by simulate")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    ns = parser.parse_args(argv)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            man = ns.func(ns)
        except UsageError as exc:
            parser.error(str(exc))
        except (DataError, FitError, ConvergenceError, ValueError, OSError) as exc:
            log.error("%s", exc)
            return EXIT_ERROR
    seen = []
    for w in caught:
        msg = str(w.message)
        if msg not in seen:
            seen.append(msg)
            log.warning("%s", msg)
    write_text(Path(ns.out) / "manifest.json", dump_json(man))
    if seen and ns.strict:
        log.error("%d warning(s) with --strict", len(seen))
        return EXIT_WARN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
