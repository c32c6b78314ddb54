"""Fitted and counterfactual rate surfaces, scenario ASMRs and contributions."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import (
    AGE_GROUPS,
    CAUSE_CODES,
    N_AGES,
    N_CAUSES,
    SEXES,
    AgeLike,
    CauseLike,
    MortalityDataset,
    StandardPopulation,
    age_group,
    cause_group,
    standardize,
)
from .errors import (
    DegenerateDenominator,
    DegenerateSeries,
    InputError,
    MissingCoefficient,
    SchemaError,
)
from .regression import BREAK_YEAR, CellFit, nb_glm_fit

SLOPE_WINDOW = (2011, 2018)


# --------------------------------------------------------------------------
# surfaces


@dataclass(frozen=True, eq=False)
class FitSurface:
    """One CellFit per (age, cause) for a single sex.

    ``fits[a][c]`` is indexed by age and cause position.  The coefficient
    array ``beta`` has shape ``[19, 12, 4]`` with zeros in zeroed cells.
    """

    sex: str
    fits: tuple[tuple[CellFit, ...], ...]
    years: tuple[int, ...]
    breakpoint: int = BREAK_YEAR
    beta: np.ndarray = field(init=False, repr=False)
    theta: np.ndarray = field(init=False, repr=False)
    zeroed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.sex not in SEXES:
            raise InputError(f"unknown sex {self.sex!r}")
        fits = tuple(tuple(row) for row in self.fits)
        if len(fits) != N_AGES or any(len(row) != N_CAUSES for row in fits):
            raise InputError("a surface needs a fit for every one of the 19 x 12 cells")
        beta = np.zeros((N_AGES, N_CAUSES, 4))
        theta = np.full((N_AGES, N_CAUSES), np.inf)
        zeroed = np.zeros((N_AGES, N_CAUSES), dtype=bool)
        for a, row in enumerate(fits):
            for c, f in enumerate(row):
                if f.zeroed:
                    zeroed[a, c] = True
                else:
                    beta[a, c] = f.beta
                    theta[a, c] = f.theta if f.theta is not None else np.inf
        for arr in (beta, theta, zeroed):
            arr.setflags(write=False)
        object.__setattr__(self, "fits", fits)
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "zeroed", zeroed)

    def cell(self, x: AgeLike, c: CauseLike) -> CellFit:
        return self.fits[age_group(x).index][cause_group(c).index]

    def replace_beta(self, beta: np.ndarray) -> "FitSurface":
        """Copy with new coefficients for every non-zeroed cell."""
        rows = []
        for a in range(N_AGES):
            rows.append(tuple(
                f if f.zeroed else f.with_beta(beta[a, c]) for c, f in enumerate(self.fits[a])
            ))
        return FitSurface(self.sex, tuple(rows), self.years, self.breakpoint)

    @property
    def n_nonconverged(self) -> int:
        return sum(not f.converged for row in self.fits for f in row)


def fit_surface(
    ds: MortalityDataset,
    breakpoint: int = BREAK_YEAR,
    workers: int | None = None,
) -> FitSurface:
    """Fit the NB breakpoint GLM to all 228 cells of a dataset."""
    years = np.asarray(ds.years)

    def fit_one(idx):
        a, c = divmod(idx, N_CAUSES)
        return nb_glm_fit(
            ds.deaths[a, c], ds.exposures[a], years, breakpoint,
            age=a, cause=CAUSE_CODES[c],
        )

    cells = range(N_AGES * N_CAUSES)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            flat = list(ex.map(fit_one, cells))
    else:
        flat = [fit_one(i) for i in cells]
    rows = tuple(tuple(flat[a * N_CAUSES:(a + 1) * N_CAUSES]) for a in range(N_AGES))
    return FitSurface(ds.sex, rows, ds.years, breakpoint)


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    """``unadjusted``, ``cause`` (with ``cause`` code) or ``all``."""

    kind: str
    cause: str | None = None

    def __post_init__(self):
        if self.kind not in ("unadjusted", "cause", "all"):
            raise InputError(f"unknown scenario kind {self.kind!r}")
        if (self.kind == "cause") != (self.cause is not None):
            raise InputError("a cause is required exactly for the cause scenario")
        if self.cause is not None:
            object.__setattr__(self, "cause", cause_group(self.cause).code)

    @classmethod
    def parse(cls, text: str) -> "ScenarioSpec":
        t = text.strip()
        low = t.lower()
        if low in ("unadjusted", "none"):
            return cls("unadjusted")
        if low == "all":
            return cls("all")
        if low.startswith("cause:"):
            return cls("cause", t.split(":", 1)[1].strip().upper())
        raise InputError(f"cannot parse scenario {text!r}; use unadjusted, cause:<CODE> or all")

    @property
    def name(self) -> str:
        return f"cause:{self.cause}" if self.kind == "cause" else self.kind

    @property
    def mask(self) -> np.ndarray:
        """Which causes have their post-break trend change removed."""
        if self.kind == "all":
            return np.ones(N_CAUSES, dtype=bool)
        m = np.zeros(N_CAUSES, dtype=bool)
        if self.kind == "cause":
            m[cause_group(self.cause).index] = True
        return m


UNADJUSTED = ScenarioSpec("unadjusted")
ALL_ADJUSTED = ScenarioSpec("all")


def adjust_surface(surface: FitSurface, spec: ScenarioSpec) -> FitSurface:
    """Set beta2 to 0 in the adjusted causes, keeping beta3."""
    mask = spec.mask
    if not mask.any():
        return surface
    beta = np.array(surface.beta)
    beta[:, mask, 2] = 0.0
    return surface.replace_beta(beta)


def _predictor(beta: np.ndarray, years: np.ndarray, bp: int) -> np.ndarray:
    """Linear predictor ``[..., year]`` for coefficient array ``[..., 4]``."""
    t = np.asarray(years, dtype=float)
    post = (t >= bp).astype(float)
    b = beta[..., None, :]
    return b[..., 0] + b[..., 1] * t + (b[..., 2] * (t - bp) + b[..., 3]) * post


def surface_rates(
    surface: FitSurface,
    years: Iterable[int],
    spec: ScenarioSpec = UNADJUSTED,
    beta: np.ndarray | None = None,
) -> np.ndarray:
    """Cause-specific rates ``[age, cause, year]`` under a scenario."""
    years = np.asarray(list(years), dtype=float)
    b = np.array(surface.beta if beta is None else beta)
    b[:, spec.mask, 2] = 0.0
    eta = _predictor(b, years, surface.breakpoint)
    rates = np.exp(eta)
    rates[surface.zeroed] = 0.0
    if np.isnan(rates).any():
        a, c = np.argwhere(np.isnan(rates).any(axis=-1))[0]
        raise MissingCoefficient(
            f"no usable coefficients for {AGE_GROUPS[a].label} {CAUSE_CODES[c]} "
            "(published tables omit beta0 and beta3)"
        )
    return rates


def fitted_rate(surface: FitSurface, x: AgeLike, c: CauseLike, t: int) -> float:
    a, k = age_group(x).index, cause_group(c).index
    if surface.zeroed[a, k]:
        return 0.0
    return float(surface_rates_cell(surface, a, k, [t])[0])


def surface_rates_cell(surface: FitSurface, a: int, k: int, years, beta2_zero: bool = False) -> np.ndarray:
    b = np.array(surface.beta[a, k])
    if beta2_zero:
        b[2] = 0.0
    out = np.exp(_predictor(b, np.asarray(years, dtype=float), surface.breakpoint))
    if np.isnan(out).any():
        raise MissingCoefficient(f"no usable coefficients for {AGE_GROUPS[a].label} {CAUSE_CODES[k]}")
    return out


def scenario_rate(surface: FitSurface, spec: ScenarioSpec, x: AgeLike, t: int) -> float:
    """All-cause rate at one age and year under a scenario."""
    a = age_group(x).index
    mask = spec.mask
    total = 0.0
    for k in range(N_CAUSES):
        if not surface.zeroed[a, k]:
            total += float(surface_rates_cell(surface, a, k, [t], bool(mask[k]))[0])
    return total


def scenario_all_cause(surface: FitSurface, spec: ScenarioSpec, years: Iterable[int]) -> np.ndarray:
    """All-cause rates ``[age, year]``."""
    return surface_rates(surface, years, spec).sum(axis=1)


def scenario_asmr_series(
    surface: FitSurface,
    spec: ScenarioSpec,
    sp: StandardPopulation,
    window: Sequence[int] = SLOPE_WINDOW,
) -> np.ndarray:
    """Log ASMR under ``spec`` for each year in the inclusive ``window``."""
    years = window_years(window)
    asmr = standardize(scenario_all_cause(surface, spec, years), sp)
    if np.any(asmr <= 0):
        raise DegenerateSeries("scenario ASMR is zero")
    return np.log(asmr)


def window_years(window: Sequence[int]) -> np.ndarray:
    lo, hi = int(window[0]), int(window[-1])
    if hi < lo:
        raise InputError(f"empty window {lo}..{hi}")
    return np.arange(lo, hi + 1)


# --------------------------------------------------------------------------
# slopes and contributions


@dataclass(frozen=True)
class ImprovementSummary:
    slope: float
    intercept: float
    window: tuple[int, int]
    ci_low: float | None = None
    ci_high: float | None = None


def ols_line(y: Sequence[float], years: Sequence[int]) -> tuple[float, float]:
    """Slope and calendar-year intercept of a straight-line least-squares fit."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(years, dtype=float)
    if y.shape != t.shape:
        raise ValueError("series and window differ in length")
    if y.size < 3:
        raise ValueError("need at least 3 points for a slope")
    tc = t - t.mean()
    slope = float(tc @ (y - y.mean()) / (tc @ tc))
    return slope, float(y.mean() - slope * t.mean())


def improvement_slope(series: Sequence[float], window: Sequence[int] = SLOPE_WINDOW) -> ImprovementSummary:
    """Sign-flipped OLS slope so that falling log mortality is positive."""
    years = window_years(window)
    slope, intercept = ols_line(series, years)
    return ImprovementSummary(-slope, intercept, (int(years[0]), int(years[-1])))


def contribution_ratio(obs: float, k: float, all_: float) -> float:
    denom = all_ - obs
    if denom == 0 or not math.isfinite(denom):
        raise DegenerateDenominator("all-adjusted and unadjusted improvements coincide")
    return (k - obs) / denom


def contribution_asmr(w_obs: float, w_k: float, w_all: float) -> float:
    """Share of the all-cause improvement gap recovered by adjusting one cause."""
    return contribution_ratio(w_obs, w_k, w_all)


def scenario_w(surface: FitSurface, spec: ScenarioSpec, sp: StandardPopulation, window=SLOPE_WINDOW) -> float:
    return improvement_slope(scenario_asmr_series(surface, spec, sp, window), window).slope


def contribution_table(
    surface: FitSurface, sp: StandardPopulation, window=SLOPE_WINDOW
) -> tuple[float, float, dict[str, float], dict[str, float]]:
    """``(w_obs, w_all, {cause: w_k}, {cause: rho})`` for every cause."""
    w_obs = scenario_w(surface, UNADJUSTED, sp, window)
    w_all = scenario_w(surface, ALL_ADJUSTED, sp, window)
    wk, rho = {}, {}
    for code in CAUSE_CODES:
        wk[code] = scenario_w(surface, ScenarioSpec("cause", code), sp, window)
        rho[code] = contribution_asmr(w_obs, wk[code], w_all)
    return w_obs, w_all, wk, rho


# --------------------------------------------------------------------------
# serialization


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _vec(v):
    return None if v is None else [_num(x) for x in v]


def cellfit_record(sex: str, f: CellFit, a: int, c: int) -> dict:
    return {
        "sex": sex,
        "age_group": AGE_GROUPS[a].label,
        "cause": CAUSE_CODES[c],
        "beta": _vec(f.beta),
        "theta": _num(f.theta),
        "se": _vec(f.se),
        "p_values": _vec(f.p_values),
        "converged": bool(f.converged),
        "zeroed": bool(f.zeroed),
        "theta_capped": bool(f.theta_capped),
        "loglik": _num(f.loglik),
    }


def surfaces_to_json(surfaces: Sequence[FitSurface]) -> dict:
    if not surfaces:
        raise ValueError("nothing to serialize")
    first = surfaces[0]
    records = []
    for s in surfaces:
        if s.years != first.years or s.breakpoint != first.breakpoint:
            raise ValueError("surfaces disagree on years or breakpoint")
        for a in range(N_AGES):
            for c in range(N_CAUSES):
                records.append(cellfit_record(s.sex, s.fits[a][c], a, c))
    return {
        "years": [first.years[0], first.years[-1]],
        "breakpoint": first.breakpoint,
        "fits": records,
    }


def write_surfaces(surfaces: Sequence[FitSurface], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(surfaces_to_json(surfaces), fh, indent=1, allow_nan=False)
        fh.write("\n")


def _floats(v, n, where):
    if v is None:
        return None
    if len(v) != n:
        raise SchemaError(f"expected {n} values", where)
    return np.array([np.nan if x is None else float(x) for x in v])


def surfaces_from_json(doc: dict, source: str = "<json>") -> dict[str, FitSurface]:
    """Rebuild surfaces; ``null`` coefficients load as ``nan``."""
    try:
        first, last = doc["years"]
        bp = int(doc.get("breakpoint", BREAK_YEAR))
        records = doc["fits"]
    except (KeyError, TypeError, ValueError):
        raise SchemaError("expected keys 'years', 'breakpoint', 'fits'", source) from None
    years = tuple(range(int(first), int(last) + 1))
    grid: dict[str, dict[tuple[int, int], CellFit]] = {}
    for i, r in enumerate(records):
        where = f"{source} record {i}"
        try:
            sex = r["sex"]
            a = age_group(r["age_group"]).index
            c = cause_group(r["cause"]).index
            if r.get("zeroed"):
                f = CellFit.zero(a, CAUSE_CODES[c], bp)
            else:
                beta = _floats(r["beta"], 4, where)
                se = _floats(r.get("se"), 4, where)
                theta = r.get("theta")
                f = CellFit(
                    beta,
                    np.inf if theta is None else float(theta),
                    cov=None if se is None else np.diag(se**2),
                    p_values=_floats(r.get("p_values"), 4, where),
                    converged=bool(r.get("converged", True)),
                    loglik=r.get("loglik"),
                    age=a,
                    cause=CAUSE_CODES[c],
                    breakpoint=bp,
                    theta_capped=bool(r.get("theta_capped", False)),
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad fit record: {exc}", where) from None
        cells = grid.setdefault(sex, {})
        if (a, c) in cells:
            raise SchemaError(f"duplicate record for {sex} {AGE_GROUPS[a].label} {CAUSE_CODES[c]}", where)
        cells[(a, c)] = f
    out = {}
    for sex, cells in grid.items():
        if len(cells) != N_AGES * N_CAUSES:
            raise SchemaError(f"{sex}: {len(cells)} of {N_AGES * N_CAUSES} cells present", source)
        rows = tuple(tuple(cells[(a, c)] for c in range(N_CAUSES)) for a in range(N_AGES))
        out[sex] = FitSurface(sex, rows, years, bp)
    return out


def read_surfaces(path: str | Path) -> dict[str, FitSurface]:
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", str(path), exc.lineno) from None
    return surfaces_from_json(doc, str(path))


def read_coefficient_csv(path: str | Path | None = None) -> dict[tuple[str, int, int], tuple[float, float]]:
    """``(sex, age, cause) -> (beta1, beta2)`` from a ``sex,age_group,cause,beta1,beta2`` file."""
    if path is None:
        text = resources.files("causemort.data").joinpath("published_coefficients.csv").read_text("utf-8")
        name = "published_coefficients.csv"
    else:
        text = Path(path).read_text("utf-8")
        name = str(path)
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != ["sex", "age_group", "cause", "beta1", "beta2"]:
        raise SchemaError("expected header 'sex,age_group,cause,beta1,beta2'", name, 1)
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            sex, ag, cause, b1, b2 = row
            key = (sex, age_group(ag).index, cause_group(cause).index)
            out[key] = (float(b1), float(b2))
        except (ValueError, InputError) as exc:
            raise SchemaError(str(exc), name, lineno) from None
    return out


def published_surface(
    sex: str,
    years: Sequence[int] = tuple(range(2001, 2019)),
    path: str | Path | None = None,
) -> FitSurface:
    """Surface carrying only the tabulated slopes; beta0 and beta3 are ``nan``.

    Rates cannot be evaluated from it, but slope-only quantities can.
    """
    table = read_coefficient_csv(path)
    rows = []
    for a in range(N_AGES):
        row = []
        for c in range(N_CAUSES):
            try:
                b1, b2 = table[(sex, a, c)]
            except KeyError:
                raise MissingCoefficient(f"no {sex} coefficients for {AGE_GROUPS[a].label} {CAUSE_CODES[c]}") from None
            row.append(CellFit(np.array([np.nan, b1, b2, np.nan]), np.inf, age=a, cause=CAUSE_CODES[c]))
        rows.append(tuple(row))
    return FitSurface(sex, tuple(rows), tuple(years))
