"""Period life expectancy from banded rates.

Rates are constant within each age band and the 85+ rate applies at every
age from 85 upwards, so the survival curve beyond 85 is geometric and its
sum has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import AGE_GROUPS, CAUSE_CODES, N_AGES, OPEN_AGE
from .errors import NonPositiveRate
from .scenarios import (
    ALL_ADJUSTED,
    SLOPE_WINDOW,
    UNADJUSTED,
    FitSurface,
    ImprovementSummary,
    ScenarioSpec,
    contribution_ratio,
    ols_line,
    scenario_all_cause,
    window_years,
)

MONTHS_PER_YEAR = 12

_BAND_OF_AGE = np.concatenate([
    np.full(g.width if g.width is not None else 1, g.index) for g in AGE_GROUPS
])


def single_age_rates(band_rates: Sequence[float], last_age: int = OPEN_AGE) -> np.ndarray:
    """Rates for single ages ``0..last_age`` expanded from 19 band rates."""
    m = np.asarray(band_rates, dtype=float)
    if m.shape != (N_AGES,):
        raise ValueError(f"expected {N_AGES} band rates, got shape {m.shape}")
    ages = np.arange(last_age + 1)
    return m[_BAND_OF_AGE[np.minimum(ages, OPEN_AGE)]]


def survival_prob(band_rates: Sequence[float], h: int, n: int) -> float:
    """Probability that someone aged ``h`` survives ``n`` more years."""
    if n < 0 or h < 0:
        raise ValueError("h and n must be non-negative")
    if n == 0:
        return 1.0
    m = single_age_rates(band_rates, h + n - 1)[h:]
    return float(np.exp(-m.sum()))


@dataclass(frozen=True)
class LifeTableResult:
    age_start: int
    year: int | None
    e_complete: float
    survival: np.ndarray  # survival[n] = n-year survival from age_start, n = 0..max(85 - h, 0)


def life_table(band_rates: Sequence[float], h: int, year: int | None = None) -> LifeTableResult:
    m = np.asarray(band_rates, dtype=float)
    if h < 0:
        raise ValueError("h must be non-negative")
    first_band = _BAND_OF_AGE[min(h, OPEN_AGE)]
    used = m[first_band:]
    if np.any(~(used > 0)) or np.any(~np.isfinite(used)):
        raise NonPositiveRate(f"all rates from age {h} upwards must be positive and finite")
    single = single_age_rates(m, OPEN_AGE)[h:OPEN_AGE]
    surv = np.exp(-np.concatenate([[0.0], np.cumsum(single)]))
    # beyond 85: S * sum_{j>=1} p^j = S * p / (1 - p) = S / expm1(m85)
    tail = surv[-1] / np.expm1(m[-1])
    e = float(surv[1:].sum() + tail + 0.5)
    return LifeTableResult(int(h), year, e, surv)


def period_life_expectancy(band_rates: Sequence[float], h: int) -> float:
    """Complete period expectation of life at age ``h`` (with the +1/2 term)."""
    return life_table(band_rates, h).e_complete


def le_series(
    surface: FitSurface,
    spec: ScenarioSpec,
    h: int,
    window: Sequence[int] = SLOPE_WINDOW,
) -> np.ndarray:
    years = window_years(window)
    rates = scenario_all_cause(surface, spec, years)
    return np.array([period_life_expectancy(rates[:, j], h) for j in range(years.size)])


def le_slope(series: Sequence[float], window: Sequence[int] = SLOPE_WINDOW) -> ImprovementSummary:
    """OLS slope of an LE series in months per year (no sign change)."""
    years = window_years(window)
    slope, intercept = ols_line(series, years)
    return ImprovementSummary(slope * MONTHS_PER_YEAR, intercept, (int(years[0]), int(years[-1])))


def contribution_le(v_obs: float, v_k: float, v_all: float) -> float:
    return contribution_ratio(v_obs, v_k, v_all)


def scenario_v(surface: FitSurface, spec: ScenarioSpec, h: int, window=SLOPE_WINDOW) -> float:
    return le_slope(le_series(surface, spec, h, window), window).slope


def contribution_table_le(
    surface: FitSurface, h: int, window=SLOPE_WINDOW
) -> tuple[float, float, dict[str, float], dict[str, float]]:
    """``(v_obs, v_all, {cause: v_k}, {cause: phi})`` at starting age ``h``."""
    v_obs = scenario_v(surface, UNADJUSTED, h, window)
    v_all = scenario_v(surface, ALL_ADJUSTED, h, window)
    vk, phi = {}, {}
    for code in CAUSE_CODES:
        vk[code] = scenario_v(surface, ScenarioSpec("cause", code), h, window)
        phi[code] = contribution_le(v_obs, vk[code], v_all)
    return v_obs, v_all, vk, phi
