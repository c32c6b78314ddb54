"""Parametric negative binomial bootstrap.

Each iteration draws a fresh death grid from the fitted surface, turns it
into rates ``d / E`` and evaluates a scalar statistic.  Every iteration
owns an independent counter-based RNG stream keyed by ``(seed, iteration)``
so results do not depend on how iterations are scheduled across threads.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .domain import CAUSE_CODES, N_AGES, StandardPopulation, cause_group, standardize
from .errors import DegenerateSeries, InputError, StatisticFailure
from .lifetable import MONTHS_PER_YEAR, period_life_expectancy
from .regression import nb_glm_fit
from .scenarios import (
    ALL_ADJUSTED,
    SLOPE_WINDOW,
    UNADJUSTED,
    FitSurface,
    ScenarioSpec,
    contribution_ratio,
    ols_line,
    surface_rates,
    window_years,
)


@dataclass(frozen=True)
class BootstrapConfig:
    iterations: int = 5000
    level: float = 0.95
    seed: int = 0
    scenario: ScenarioSpec = UNADJUSTED
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise InputError("iterations must be at least 1")
        if not 0 < self.level < 1:
            raise InputError("level must lie strictly between 0 and 1")
        if not 0 <= self.seed < 2**64:
            raise InputError("seed must be a 64-bit unsigned integer")


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(iteration,))))


def simulate_counts(
    surface: FitSurface,
    exposures: np.ndarray,
    seed: int,
    iteration: int,
) -> np.ndarray:
    """One NB draw of the ``[age, cause, year]`` death grid.

    NB counts come from a gamma-mixed Poisson; cells with infinite theta
    are plain Poisson and zeroed cells are always 0.
    """
    E = np.asarray(exposures, dtype=float)
    if E.shape != (N_AGES, len(surface.years)):
        raise InputError("exposures do not match the surface grid")
    mu = surface_rates(surface, surface.years) * E[:, None, :]
    theta = np.broadcast_to(surface.theta[:, :, None], mu.shape)
    rng = iteration_rng(seed, iteration)
    lam = mu.copy()
    mixed = np.isfinite(theta) & (mu > 0)
    lam[mixed] = rng.gamma(theta[mixed], mu[mixed] / theta[mixed])
    counts = rng.poisson(lam)
    counts[surface.zeroed] = 0
    return counts.astype(np.int64)


# --------------------------------------------------------------------------
# statistics


class Statistic(Protocol):
    name: str

    def point(self, surface: FitSurface, exposures: np.ndarray) -> float: ...

    def __call__(self, counts: np.ndarray, exposures: np.ndarray, surface: FitSurface) -> float: ...


def replicate_rates(
    counts: np.ndarray,
    exposures: np.ndarray,
    surface: FitSurface,
    spec: ScenarioSpec,
    years: np.ndarray,
) -> np.ndarray:
    """Cause rates ``[age, cause, year]`` for one simulated grid.

    Unadjusted causes use ``d / E`` directly.  Causes adjusted by ``spec``
    are refitted on the simulated counts and evaluated with beta2 = 0.
    """
    E = np.asarray(exposures, dtype=float)
    all_years = np.asarray(surface.years)
    idx = years - all_years[0]
    rates = counts[:, :, idx] / E[:, None, idx]
    bp = surface.breakpoint
    for c in np.flatnonzero(spec.mask):
        for a in range(N_AGES):
            if surface.zeroed[a, c]:
                rates[a, c] = 0.0
                continue
            f = nb_glm_fit(counts[a, c], E[a], all_years, bp, age=a, cause=CAUSE_CODES[c])
            if f.zeroed:
                rates[a, c] = 0.0
                continue
            b = f.beta
            t = years.astype(float)
            rates[a, c] = np.exp(b[0] + b[1] * t + b[3] * (t >= bp))
    return rates


def _log_asmr(rates_all: np.ndarray, sp: StandardPopulation) -> np.ndarray:
    asmr = standardize(rates_all, sp)
    if np.any(asmr <= 0):
        raise DegenerateSeries("ASMR is zero")
    return np.log(asmr)


def _w(rates_all, sp, years) -> float:
    return -ols_line(_log_asmr(rates_all, sp), years)[0]


def _v(rates_all, h, years) -> float:
    le = [period_life_expectancy(rates_all[:, j], h) for j in range(len(years))]
    return ols_line(le, years)[0] * MONTHS_PER_YEAR


@dataclass(frozen=True)
class _RateStatistic:
    """Statistic computed from all-cause rates under one or more scenarios."""

    name: str
    kind: str  # w | v | asmr | le | rho | phi
    sp: StandardPopulation | None = None
    scenario: ScenarioSpec = UNADJUSTED
    h: int = 0
    year: int | None = None
    cause: str | None = None
    window: tuple[int, int] = SLOPE_WINDOW

    def _years(self):
        if self.year is not None:
            return np.array([self.year])
        return window_years(self.window)

    def _measure(self, rates_all, years):
        if self.kind in ("w", "rho"):
            return _w(rates_all, self.sp, years)
        if self.kind in ("v", "phi"):
            return _v(rates_all, self.h, years)
        if self.kind == "asmr":
            return float(standardize(rates_all[:, 0], self.sp))
        return period_life_expectancy(rates_all[:, 0], self.h)

    def _specs(self):
        if self.kind in ("rho", "phi"):
            return (UNADJUSTED, ScenarioSpec("cause", self.cause), ALL_ADJUSTED)
        return (self.scenario,)

    def _combine(self, values):
        if self.kind in ("rho", "phi"):
            obs, k, all_ = values
            return contribution_ratio(obs, k, all_)
        return values[0]

    def point(self, surface, exposures):
        years = self._years()
        vals = [self._measure(surface_rates(surface, years, s).sum(axis=1), years) for s in self._specs()]
        return float(self._combine(vals))

    def __call__(self, counts, exposures, surface):
        years = self._years()
        vals = []
        for s in self._specs():
            r = replicate_rates(counts, exposures, surface, s, years)
            vals.append(self._measure(r.sum(axis=1), years))
        return float(self._combine(vals))


def make_statistic(
    name: str,
    sp: StandardPopulation | None = None,
    scenario: ScenarioSpec = UNADJUSTED,
    window: Sequence[int] = SLOPE_WINDOW,
) -> Statistic:
    """Build a named statistic.

    Names: ``w``, ``v0``, ``v65`` (improvement slopes), ``rho:CODE``,
    ``phi0:CODE``, ``phi65:CODE`` (contributions), ``asmr:YEAR``,
    ``le0:YEAR``, ``le65:YEAR``.
    """
    window = (int(window[0]), int(window[-1]))
    head, _, arg = name.strip().partition(":")
    head = head.lower()
    try:
        if head == "w" and not arg:
            return _RateStatistic(name, "w", sp, scenario, window=window)
        if head in ("v0", "v65") and not arg:
            return _RateStatistic(name, "v", sp, scenario, h=int(head[1:]), window=window)
        if head == "rho" and arg:
            return _RateStatistic(name, "rho", sp, cause=cause_group(arg.upper()).code, window=window)
        if head in ("phi0", "phi65") and arg:
            return _RateStatistic(name, "phi", sp, h=int(head[3:]), cause=cause_group(arg.upper()).code, window=window)
        if head == "asmr" and arg:
            return _RateStatistic(name, "asmr", sp, scenario, year=int(arg))
        if head in ("le0", "le65") and arg:
            return _RateStatistic(name, "le", sp, scenario, h=int(head[2:]), year=int(arg))
    except ValueError:
        pass
    raise InputError(
        f"unknown statistic {name!r}; expected w, v0, v65, rho:CODE, phi0:CODE, phi65:CODE, "
        "asmr:YEAR, le0:YEAR or le65:YEAR"
    )


# --------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class BootstrapResult:
    statistic: str
    point: float
    ci_low: float
    ci_high: float
    level: float
    iterations: int
    seed: int
    replicates: np.ndarray

    def summary(self) -> dict:
        return {
            "statistic": self.statistic,
            "point": self.point,
            "level": self.level,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "iterations": self.iterations,
            "seed": self.seed,
        }


def percentile_interval(replicates: Sequence[float], level: float) -> tuple[float, float]:
    """Percentile interval whose endpoints are order statistics."""
    r = np.asarray(replicates, dtype=float)
    alpha = 1.0 - level
    lo, hi = np.quantile(r, [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
    return float(lo), float(hi)


def bootstrap_replicates(
    surface: FitSurface,
    exposures: np.ndarray,
    statistic: Statistic,
    iterations: int,
    seed: int,
    workers: int = 1,
) -> np.ndarray:
    def one(i):
        counts = simulate_counts(surface, exposures, seed, i)
        try:
            return statistic(counts, exposures, surface)
        except Exception as exc:
            raise StatisticFailure(i, exc) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            values = list(ex.map(one, range(iterations)))
    else:
        values = [one(i) for i in range(iterations)]
    return np.array(values, dtype=float)


def bootstrap_ci(
    surface: FitSurface,
    exposures: np.ndarray,
    statistic: Statistic,
    cfg: BootstrapConfig = BootstrapConfig(),
) -> BootstrapResult:
    point = float(statistic.point(surface, exposures))
    reps = bootstrap_replicates(surface, exposures, statistic, cfg.iterations, cfg.seed, cfg.workers)
    lo, hi = percentile_interval(reps, cfg.level)
    return BootstrapResult(
        getattr(statistic, "name", "statistic"), point, lo, hi, cfg.level, cfg.iterations, cfg.seed, reps
    )


def write_replicates(result: BootstrapResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "value"])
        for i, v in enumerate(result.replicates):
            w.writerow([i, format(v, ".6g") if math.isfinite(v) else repr(float(v))])


def write_summary(result: BootstrapResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.summary(), fh, indent=1)
        fh.write("\n")
