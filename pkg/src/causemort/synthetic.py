"""Synthetic surfaces and datasets with known coefficients."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .bootstrap import simulate_counts
from .domain import AGE_GROUPS, CAUSE_CODES, N_AGES, N_CAUSES, MortalityDataset
from .regression import BREAK_YEAR, CellFit
from .scenarios import FitSurface

YEARS = tuple(range(2001, 2019))

# rough cause mix of all deaths
CAUSE_SHARES = np.array([0.28, 0.27, 0.05, 0.02, 0.04, 0.02, 0.02, 0.08, 0.01, 0.07, 0.13, 0.01])


def gompertz_rates(sex: str = "male") -> np.ndarray:
    """All-cause band rates from a Gompertz-Makeham curve plus an infant term."""
    mid = np.array([g.lower_age + (g.width or 10) / 2 for g in AGE_GROUPS])
    scale = 1.0 if sex == "male" else 0.7
    m = scale * (2e-4 + 2.5e-5 * np.exp(0.1 * mid))
    m[0] += 4e-3
    return m


def make_surface(
    sex: str,
    beta: np.ndarray,
    theta: float | np.ndarray = np.inf,
    zeroed: np.ndarray | None = None,
    years: Sequence[int] = YEARS,
    breakpoint: int = BREAK_YEAR,
) -> FitSurface:
    """FitSurface from a coefficient array ``[19, 12, 4]``."""
    beta = np.asarray(beta, dtype=float)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (N_AGES, N_CAUSES))
    zeroed = np.zeros((N_AGES, N_CAUSES), bool) if zeroed is None else np.asarray(zeroed, bool)
    rows = []
    for a in range(N_AGES):
        row = []
        for c in range(N_CAUSES):
            if zeroed[a, c]:
                row.append(CellFit.zero(a, CAUSE_CODES[c], breakpoint))
            else:
                row.append(CellFit(beta[a, c], float(theta[a, c]), age=a, cause=CAUSE_CODES[c], breakpoint=breakpoint))
        rows.append(tuple(row))
    return FitSurface(sex, tuple(rows), tuple(years), breakpoint)


def designed_beta(
    sex: str = "male",
    slope: float = -0.02,
    slowdown: dict[str, float] | None = None,
    level_shift: float = 0.0,
    breakpoint: int = BREAK_YEAR,
) -> np.ndarray:
    """Coefficients with a common pre-break slope and chosen beta2 per cause.

    The rate in the break year equals the Gompertz rate split by cause share.
    """
    slowdown = slowdown or {}
    base = np.log(gompertz_rates(sex)[:, None] * CAUSE_SHARES[None, :])
    beta = np.zeros((N_AGES, N_CAUSES, 4))
    beta[:, :, 0] = base - slope * breakpoint
    beta[:, :, 1] = slope
    beta[:, :, 3] = level_shift
    for code, b2 in slowdown.items():
        beta[:, CAUSE_CODES.index(code), 2] = b2
    return beta


def simulate_dataset(surface: FitSurface, exposures: np.ndarray, seed: int, iteration: int = 0) -> MortalityDataset:
    counts = simulate_counts(surface, exposures, seed, iteration)
    return MortalityDataset(surface.sex, surface.years, counts, exposures)


def flat_exposures(value: float = 1e6, years: Sequence[int] = YEARS) -> np.ndarray:
    return np.full((N_AGES, len(years)), float(value))
