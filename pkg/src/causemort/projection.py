"""Deterministic projections beyond the last fitted year.

Each future scenario adds an extra trend ``beta4 (t - 2018) I(t >= 2018)``
to the fitted log rate of every cell, so projected rates start from the
fitted 2018 values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import AGE_GROUPS, CAUSE_CODES, N_AGES, N_CAUSES, AgeLike, CauseLike, age_group, cause_group
from .errors import InputError, MissingWhoCell, SchemaError
from .lifetable import period_life_expectancy
from .scenarios import FitSurface, _predictor

BASE_YEAR = 2018
HORIZON = (2019, 2028)
MAX_YEAR = 2040


@dataclass(frozen=True, eq=False)
class WhoTrendTable:
    """Annual change in log mortality per (age, cause) for one sex."""

    sex: str
    trends: np.ndarray

    def __post_init__(self):
        t = np.array(self.trends, dtype=float)
        if t.shape != (N_AGES, N_CAUSES):
            raise MissingWhoCell(f"trend table needs {N_AGES} x {N_CAUSES} cells, got {t.shape}")
        if np.isnan(t).any():
            a, c = np.argwhere(np.isnan(t))[0]
            raise MissingWhoCell(f"no trend for {self.sex} {AGE_GROUPS[a].label} {CAUSE_CODES[c]}")
        t.setflags(write=False)
        object.__setattr__(self, "trends", t)


def load_who_trends(sex: str, path: str | Path | None = None) -> WhoTrendTable:
    """Read ``sex,age_group,cause,beta_who`` rows for one sex (bundled file by default)."""
    if path is None:
        text = resources.files("causemort.data").joinpath("who_trends.csv").read_text("utf-8")
        name = "who_trends.csv"
    else:
        text = Path(path).read_text("utf-8")
        name = str(path)
    rows = list(csv.reader(text.splitlines()))
    if not rows or [h.strip() for h in rows[0]] != ["sex", "age_group", "cause", "beta_who"]:
        raise SchemaError("expected header 'sex,age_group,cause,beta_who'", name, 1)
    trends = np.full((N_AGES, N_CAUSES), np.nan)
    for lineno, row in enumerate(rows[1:], start=2):
        if not "".join(row).strip():
            continue
        try:
            s, ag, cause, value = (v.strip() for v in row)
            if s != sex:
                continue
            a, c = age_group(ag).index, cause_group(cause).index
            trends[a, c] = float(value)
        except (ValueError, InputError) as exc:
            raise SchemaError(str(exc), name, lineno) from None
    return WhoTrendTable(sex, trends)


@dataclass(frozen=True)
class FutureScenario:
    """FS1 continue, FS2 revert one cause, FS3 revert all, FS4 extra improvement z, FS5 WHO trends."""

    kind: int
    cause: str | None = None
    z: float | None = None
    who: WhoTrendTable | None = None
    horizon: tuple[int, int] = HORIZON

    def __post_init__(self):
        if self.kind not in (1, 2, 3, 4, 5):
            raise InputError(f"unknown future scenario FS{self.kind}")
        if (self.kind == 2) != (self.cause is not None):
            raise InputError("FS2 needs exactly one cause")
        if self.kind == 2:
            object.__setattr__(self, "cause", cause_group(self.cause).code)
        if self.kind == 4:
            if self.z is None or not 0 <= self.z < 1:
                raise InputError("FS4 needs z in [0, 1)")
        elif self.z is not None:
            raise InputError("z applies only to FS4")
        if (self.kind == 5) != (self.who is not None):
            raise InputError("FS5 needs a WHO trend table")
        lo, hi = self.horizon
        if lo != BASE_YEAR + 1 or not lo <= hi <= MAX_YEAR:
            raise InputError(f"horizon must run from {BASE_YEAR + 1} to at most {MAX_YEAR}")

    @classmethod
    def parse(cls, text: str, who: WhoTrendTable | None = None, horizon=HORIZON) -> "FutureScenario":
        t = text.strip().upper().removeprefix("FS")
        head, _, arg = t.partition(":")
        try:
            kind = int(head)
        except ValueError:
            raise InputError(f"cannot parse future scenario {text!r}") from None
        if kind == 2:
            return cls(2, cause=arg, horizon=horizon)
        if kind == 4:
            try:
                z = float(arg)
            except ValueError:
                raise InputError(f"FS4 needs a numeric z, got {arg!r}") from None
            return cls(4, z=z, horizon=horizon)
        if arg:
            raise InputError(f"FS{kind} takes no argument")
        return cls(kind, who=who if kind == 5 else None, horizon=horizon)

    @property
    def name(self) -> str:
        if self.kind == 2:
            return f"FS2:{self.cause}"
        if self.kind == 4:
            # no extra improvement is the continue-trend scenario
            return f"FS4:{self.z:g}" if self.z else "FS1"
        return f"FS{self.kind}"


def beta4_grid(surface: FitSurface, fs: FutureScenario) -> np.ndarray:
    """Extra post-2018 trend ``[age, cause]`` for a scenario; 0 in zeroed cells."""
    b1 = surface.beta[:, :, 1]
    b2 = surface.beta[:, :, 2]
    if fs.kind == 1:
        out = np.zeros((N_AGES, N_CAUSES))
    elif fs.kind == 2:
        out = np.zeros((N_AGES, N_CAUSES))
        c = cause_group(fs.cause).index
        out[:, c] = -b2[:, c]
    elif fs.kind == 3:
        out = -b2
    elif fs.kind == 4:
        out = np.full((N_AGES, N_CAUSES), math.log1p(-fs.z))
    else:
        if fs.who.sex != surface.sex:
            raise InputError(f"WHO table is for {fs.who.sex}, surface is {surface.sex}")
        out = fs.who.trends - (b1 + b2)
    out = np.where(surface.zeroed, 0.0, out)
    return out + 0.0  # normalise -0.0


def projected_rates(surface: FitSurface, beta4: np.ndarray, years: Sequence[int]) -> np.ndarray:
    """Cause rates ``[age, cause, year]`` for years from 2018 on."""
    t = np.asarray(years, dtype=float)
    if np.any(t < BASE_YEAR):
        raise InputError(f"projection years must be >= {BASE_YEAR}")
    eta = _predictor(np.asarray(surface.beta), t, surface.breakpoint)
    eta = eta + np.asarray(beta4)[:, :, None] * (t - BASE_YEAR)
    rates = np.exp(eta)
    rates[surface.zeroed] = 0.0
    return rates


def project_rate(surface: FitSurface, beta4: np.ndarray, x: AgeLike, c: CauseLike, t: int) -> float:
    a, k = age_group(x).index, cause_group(c).index
    return float(projected_rates(surface, beta4, [t])[a, k, 0])


def horizon_years(fs: FutureScenario) -> np.ndarray:
    return np.arange(fs.horizon[0], fs.horizon[1] + 1)


def project_le_path(surface: FitSurface, fs: FutureScenario, h: int) -> np.ndarray:
    """Period life expectancy at age ``h`` for each horizon year."""
    years = horizon_years(fs)
    rates = projected_rates(surface, beta4_grid(surface, fs), years).sum(axis=1)
    return np.array([period_life_expectancy(rates[:, j], h) for j in range(years.size)])
