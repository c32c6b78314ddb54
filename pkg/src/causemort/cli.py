"""Command-line interface.

Each subcommand reads its inputs, calls the library and writes files into
the output directory (``--out``, ``$CAUSEMORT_OUT`` or the working
directory).  Options may also come from a ``key = value`` config file given
with ``--config``; command-line flags take precedence.

Exit codes: 0 success, 1 computation error, 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, bootstrap_ci, make_statistic, write_replicates, write_summary
from .breakpoint import asmr_series, select_breakpoint, write_bic_table
from .domain import (
    CAUSE_CODES,
    SEXES,
    MortalityDataset,
    load_dataset,
    load_standard_population,
    read_dataset,
)
from .errors import CausemortError, InputError
from .lifetable import contribution_table_le, le_series, le_slope
from .projection import HORIZON, FutureScenario, horizon_years, load_who_trends, project_le_path
from .regression import BREAK_YEAR
from .scenarios import (
    SLOPE_WINDOW,
    FitSurface,
    ScenarioSpec,
    contribution_table,
    fit_surface,
    improvement_slope,
    read_surfaces,
    scenario_asmr_series,
    window_years,
    write_surfaces,
)

OUT_ENV = "CAUSEMORT_OUT"

# config keys and how to coerce them
CONFIG_KEYS = {
    "deaths": str, "exposures": str, "sex": str, "std_pop": str, "fits": str,
    "who": str, "out": str, "format": str, "breakpoint": int, "years": str,
    "coding": str, "iters": int, "seed": int, "level": float, "workers": int,
    "window": str,
}


def fmt(x: float) -> str:
    """Table number format: at most 6 significant digits."""
    x = float(x)
    if not math.isfinite(x):
        return repr(x)
    return format(x, ".6g")


# --------------------------------------------------------------------------
# config


def read_config(path: str | Path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in CONFIG_KEYS:
            raise InputError(f"{path}:{lineno}: expected 'key = value' with key in {sorted(CONFIG_KEYS)}")
        try:
            out[key] = CONFIG_KEYS[key](value.strip())
        except ValueError:
            raise InputError(f"{path}:{lineno}: bad value for {key}") from None
    return out


def _span(text: str, what: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(":")
    try:
        return (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise InputError(f"{what} must look like FIRST:LAST, got {text!r}") from None


class Run:
    """Resolved options for one invocation."""

    def __init__(self, args: argparse.Namespace):
        cfg = read_config(args.config) if args.config else {}
        defaults = {
            "sex": "male", "out": os.environ.get(OUT_ENV, "."), "format": "csv",
            "breakpoint": BREAK_YEAR, "years": "2001:2018", "coding": "auto",
            "iters": 5000, "seed": 0, "level": 0.95, "workers": 1,
            "window": f"{SLOPE_WINDOW[0]}:{SLOPE_WINDOW[1]}",
        }
        for key in CONFIG_KEYS:
            value = getattr(args, key, None)
            if value is None:
                value = cfg.get(key, defaults.get(key))
            setattr(self, key, value)
        self.args = args
        self.years = _span(str(self.years), "years")
        self.window = _span(str(self.window), "window")
        if self.format not in ("csv", "json", "both"):
            raise InputError("format must be csv, json or both")
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def sexes(self) -> list[str]:
        if self.sex == "both":
            return list(SEXES)
        if self.sex not in SEXES:
            raise InputError(f"sex must be male, female or both, got {self.sex!r}")
        return [self.sex]

    def require(self, *keys):
        missing = [k for k in keys if getattr(self, k) is None]
        if missing:
            raise InputError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")

    def dataset(self, sex: str) -> MortalityDataset:
        self.require("deaths", "exposures")
        return load_dataset(self.deaths, self.exposures, sex, self.years, self.coding)

    def standard_population(self):
        return load_standard_population(self.std_pop)

    def surface(self, sex: str) -> FitSurface:
        if self.fits:
            surfaces = read_surfaces(self.fits)
            if sex not in surfaces:
                raise InputError(f"{self.fits} has no {sex} fits")
            return surfaces[sex]
        return fit_surface(self.dataset(sex), self.breakpoint, self.workers)

    def path(self, stem: str, sex: str | None, ext: str) -> Path:
        name = f"{stem}_{sex}.{ext}" if sex else f"{stem}.{ext}"
        return self.out / name

    def wants(self, kind: str) -> bool:
        return self.format in (kind, "both")


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, allow_nan=False)
        fh.write("\n")


def emit(run: Run, stem: str, sex: str | None, header, rows) -> list[Path]:
    written = []
    if run.wants("csv"):
        p = run.path(stem, sex, "csv")
        write_table(p, header, rows)
        written.append(p)
    if run.wants("json"):
        p = run.path(stem, sex, "json")
        records = [
            {h: (float(v) if isinstance(v, (float, np.floating)) else v) for h, v in zip(header, row)}
            for row in rows
        ]
        write_json(p, records)
        written.append(p)
    return written


# --------------------------------------------------------------------------
# commands


def cmd_validate(run: Run) -> int:
    run.require("deaths", "exposures")
    n_err = n_warn = 0
    for sex in run.sexes:
        _, report = read_dataset(run.deaths, run.exposures, sex, run.years, run.coding)
        for issue in report.issues:
            print(f"{sex}: {issue}")
        n_err += len(report.errors)
        n_warn += len(report.warnings)
    print(f"{n_err} errors, {n_warn} warnings")
    return 2 if n_err else 0


def cmd_fit(run: Run) -> int:
    surfaces = [fit_surface(run.dataset(sex), run.breakpoint, run.workers) for sex in run.sexes]
    path = run.out / "fits.json"
    write_surfaces(surfaces, path)
    for s in surfaces:
        print(f"{s.sex}: {int(s.zeroed.sum())} zeroed, {s.n_nonconverged} not converged")
    print(path)
    return 0


def cmd_breakpoint(run: Run) -> int:
    sp = run.standard_population()
    for sex in run.sexes:
        ds = run.dataset(sex)
        sel = select_breakpoint(asmr_series(ds, sp), ds.years)
        if run.wants("csv"):
            write_bic_table(sel, run.path("bic", sex, "csv"), fmt)
        if run.wants("json"):
            write_json(run.path("bic", sex, "json"), {
                "best_epsilon": sel.best_epsilon,
                "best_kind": sel.best_kind,
                "base_bic": sel.base_bic,
                "table": [{"epsilon": int(e) if e else None, "kind": k, "bic": b} for e, k, b in sel.rows()],
            })
        eps = sel.best_epsilon if sel.best_epsilon is not None else "-"
        print(f"{sex}: epsilon={eps} kind={sel.best_kind} bic={fmt(sel.best_bic)}")
    return 0


def cmd_asmr(run: Run) -> int:
    spec = ScenarioSpec.parse(run.args.scenario)
    sp = run.standard_population()
    years = window_years(run.window)
    for sex in run.sexes:
        series = scenario_asmr_series(run.surface(sex), spec, sp, run.window)
        w = improvement_slope(series, run.window)
        emit(run, "asmr", sex, ["year", "log_asmr"], [(int(t), float(v)) for t, v in zip(years, series)])
        emit(run, "w", sex, ["scenario", "w", "ci_low", "ci_high"], [(spec.name, w.slope, "", "")])
        print(f"{sex}: {spec.name} w={fmt(w.slope)}")
    return 0


def cmd_le(run: Run) -> int:
    spec = ScenarioSpec.parse(run.args.scenario)
    h = run.args.age
    years = window_years(run.window)
    for sex in run.sexes:
        series = le_series(run.surface(sex), spec, h, run.window)
        v = le_slope(series, run.window)
        emit(run, f"le{h}", sex, ["year", "age_start", "scenario", "e_complete"],
             [(int(t), h, spec.name, float(e)) for t, e in zip(years, series)])
        emit(run, f"v{h}", sex, ["scenario", "v", "ci_low", "ci_high"], [(spec.name, v.slope, "", "")])
        print(f"{sex}: {spec.name} v{h}={fmt(v.slope)} months/year")
    return 0


def cmd_contrib(run: Run) -> int:
    measure = run.args.measure
    for sex in run.sexes:
        surface = run.surface(sex)
        if measure == "asmr":
            w_obs, w_all, _, rho = contribution_table(surface, run.standard_population(), run.window)
            emit(run, "rho", sex, ["cause", "rho"], [(c, rho[c]) for c in CAUSE_CODES])
            print(f"{sex}: w_obs={fmt(w_obs)} w_all={fmt(w_all)}")
        else:
            v0 = contribution_table_le(surface, 0, run.window)
            v65 = contribution_table_le(surface, 65, run.window)
            emit(run, "phi", sex, ["cause", "phi_birth", "phi_65"], [(c, v0[3][c], v65[3][c]) for c in CAUSE_CODES])
            print(f"{sex}: v0_obs={fmt(v0[0])} v0_all={fmt(v0[1])} v65_obs={fmt(v65[0])} v65_all={fmt(v65[1])}")
    return 0


def cmd_bootstrap(run: Run) -> int:
    spec = ScenarioSpec.parse(run.args.scenario)
    cfg = BootstrapConfig(run.iters, run.level, run.seed, spec, run.workers)
    stat = make_statistic(run.args.stat, run.standard_population(), spec, run.window)
    for sex in run.sexes:
        surface = run.surface(sex)
        exposures = run.dataset(sex).exposures
        res = bootstrap_ci(surface, exposures, stat, cfg)
        write_replicates(res, run.path("replicates", sex, "csv"))
        write_summary(res, run.path("bootstrap", sex, "json"))
        print(f"{sex}: {res.statistic} point={fmt(res.point)} ci=[{fmt(res.ci_low)}, {fmt(res.ci_high)}]")
    return 0


def cmd_project(run: Run) -> int:
    horizon = (HORIZON[0], run.args.until)
    for sex in run.sexes:
        who = load_who_trends(sex, run.who) if run.args.fs.strip().upper().removeprefix("FS").startswith("5") else None
        fs = FutureScenario.parse(run.args.fs, who, horizon)
        surface = run.surface(sex)
        rows = []
        for h in run.args.age:
            path = project_le_path(surface, fs, h)
            rows += [(int(t), fs.name, h, float(e)) for t, e in zip(horizon_years(fs), path)]
        emit(run, "projection", sex, ["year", "scenario", "age_start", "e_complete"], rows)
        print(f"{sex}: {fs.name} {len(rows)} rows")
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "breakpoint": cmd_breakpoint,
    "asmr": cmd_asmr,
    "le": cmd_le,
    "contrib": cmd_contrib,
    "bootstrap": cmd_bootstrap,
    "project": cmd_project,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("inputs and outputs")
    g.add_argument("--config", help="key = value file with defaults for any option below")
    g.add_argument("--deaths", help="deaths CSV")
    g.add_argument("--exposures", help="exposures CSV")
    g.add_argument("--sex", choices=["male", "female", "both"])
    g.add_argument("--years", help="data span FIRST:LAST (default 2001:2018)")
    g.add_argument("--coding", choices=["auto", "group", "icd10"], help="cause column coding")
    g.add_argument("--std-pop", dest="std_pop", help="standard population CSV (default ESP 2013)")
    g.add_argument("--fits", help="fit JSON to use instead of refitting")
    g.add_argument("--breakpoint", type=int, help="break year for the NB model (default 2011)")
    g.add_argument("--window", help="slope window FIRST:LAST (default 2011:2018)")
    g.add_argument("--workers", type=int, help="threads for fitting and bootstrap")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    g.add_argument("--format", choices=["csv", "json", "both"])

    p = argparse.ArgumentParser(prog="causemort", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check input files")
    sub.add_parser("fit", parents=[common], help="fit NB models and write fits.json")
    sub.add_parser("breakpoint", parents=[common], help="BIC search for the log-ASMR breakpoint")
    s = sub.add_parser("asmr", parents=[common], help="scenario log-ASMR series and w")
    s.add_argument("--scenario", default="unadjusted", help="unadjusted, cause:<CODE> or all")
    s = sub.add_parser("le", parents=[common], help="scenario life expectancy series and v")
    s.add_argument("--scenario", default="unadjusted")
    s.add_argument("--age", type=int, choices=[0, 65], default=0)
    s = sub.add_parser("contrib", parents=[common], help="contribution table for every cause")
    s.add_argument("--measure", choices=["asmr", "le"], default="asmr")
    s = sub.add_parser("bootstrap", parents=[common], help="parametric bootstrap CI")
    s.add_argument("--stat", required=True, help="w, v0, v65, rho:CODE, phi0:CODE, phi65:CODE, asmr:YEAR, le0:YEAR")
    s.add_argument("--scenario", default="unadjusted")
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--level", type=float)
    s = sub.add_parser("project", parents=[common], help="future life expectancy paths")
    s.add_argument("--fs", required=True, help="1, 2:<CODE>, 3, 4:<z> or 5")
    s.add_argument("--who", help="WHO trend CSV for FS5 (default bundled table)")
    s.add_argument("--age", type=int, nargs="+", default=[0])
    s.add_argument("--until", type=int, default=HORIZON[1], help="last projection year (at most 2040)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = Run(args)
        return COMMANDS[args.command](run)
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(2, exc)
    except CausemortError as exc:
        return _fail(1, exc)


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
