"""Single-breakpoint search on the all-cause log-ASMR trend."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import MortalityDataset, StandardPopulation, standardize
from .errors import DegenerateSeries
from .regression import DesignSpec, ols_fit

DEFAULT_GRID = tuple(range(2003, 2017))

# tie order: earlier position wins
_KIND_ORDER = {"continuous": 0, "discontinuous": 1}
_SPEC_KIND = {"continuous": "continuous_break", "discontinuous": "discontinuous_break"}


@dataclass(frozen=True)
class BreakpointSelection:
    best_epsilon: int | None
    best_kind: str
    bic_table: dict[tuple[int, str], float]
    base_bic: float
    years: tuple[int, ...]

    @property
    def best_bic(self) -> float:
        if self.best_kind == "none":
            return self.base_bic
        return self.bic_table[(self.best_epsilon, self.best_kind)]

    def rows(self) -> list[tuple[str, str, float]]:
        """``(epsilon, kind, bic)`` rows, the no-break model first."""
        out = [("", "none", self.base_bic)]
        for (eps, kind), bic in sorted(self.bic_table.items(), key=lambda kv: (kv[0][0], _KIND_ORDER[kv[0][1]])):
            out.append((str(eps), kind, bic))
        return out


def asmr_series(ds: MortalityDataset, sp: StandardPopulation) -> np.ndarray:
    """Natural log of the all-cause observed ASMR for each dataset year."""
    m = ds.all_cause_deaths / ds.exposures
    asmr = standardize(m, sp)
    if np.any(asmr <= 0):
        bad = [ds.years[i] for i in np.flatnonzero(asmr <= 0)]
        raise DegenerateSeries(f"ASMR is zero in {bad}")
    return np.log(asmr)


def select_breakpoint(
    series: Sequence[float],
    years: Sequence[int],
    grid: Iterable[int] = DEFAULT_GRID,
) -> BreakpointSelection:
    """Compare the no-break, continuous and discontinuous models by BIC.

    Ties resolve to the no-break model, then the earliest epsilon, then the
    continuous kind.
    """
    y = np.asarray(series, dtype=float)
    years = tuple(int(t) for t in years)
    if y.shape != (len(years),):
        raise ValueError("series and years differ in length")
    grid = tuple(int(e) for e in grid)
    for eps in grid:
        n_pre = sum(t < eps for t in years)
        n_post = len(years) - n_pre
        if n_pre < 2 or n_post < 2:
            raise ValueError(f"grid year {eps} leaves fewer than 2 points on one side")

    base = ols_fit(y, DesignSpec("no_break", years)).bic
    table: dict[tuple[int, str], float] = {}
    for eps in grid:
        for kind in _KIND_ORDER:
            table[(eps, kind)] = ols_fit(y, DesignSpec(_SPEC_KIND[kind], years, eps)).bic

    best = (base, -1, -1, None, "none")
    for (eps, kind), bic in table.items():
        cand = (bic, 0, eps * 2 + _KIND_ORDER[kind], eps, kind)
        if cand[:3] < best[:3]:
            best = cand
    return BreakpointSelection(best[3], best[4], table, base, years)


def write_bic_table(sel: BreakpointSelection, path: str | Path, fmt=lambda x: format(x, ".6g")) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "kind", "bic"])
        for eps, kind, bic in sel.rows():
            w.writerow([eps, kind, fmt(bic) if math.isfinite(bic) else repr(bic)])
