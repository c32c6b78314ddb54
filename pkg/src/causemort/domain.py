"""Age groups, cause groups, datasets and observed rates.

All grids are stored as dense numpy arrays indexed ``[age, cause, year]``
(deaths) and ``[age, year]`` (exposures) in the fixed orders of
:data:`AGE_GROUPS` and :data:`CAUSE_GROUPS`.
"""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Sequence, Union

import numpy as np

from .errors import (
    GapError,
    InputError,
    MalformedCode,
    RangeError,
    SchemaError,
    UnknownCode,
)

Sex = Literal["male", "female"]
SEXES: tuple[str, ...] = ("male", "female")
DEFAULT_YEARS: tuple[int, int] = (2001, 2018)


@dataclass(frozen=True)
class AgeGroup:
    index: int
    label: str
    lower_age: int
    width: int | None  # None marks the open-ended 85+ band

    @property
    def upper_age(self) -> int | None:
        return None if self.width is None else self.lower_age + self.width - 1


def _build_age_groups() -> tuple[AgeGroup, ...]:
    groups = [AgeGroup(0, "<1", 0, 1), AgeGroup(1, "1-4", 1, 4)]
    for i, lo in enumerate(range(5, 85, 5), start=2):
        groups.append(AgeGroup(i, f"{lo}-{lo + 4}", lo, 5))
    groups.append(AgeGroup(len(groups), "85+", 85, None))
    return tuple(groups)


AGE_GROUPS: tuple[AgeGroup, ...] = _build_age_groups()
N_AGES = len(AGE_GROUPS)
OPEN_AGE = AGE_GROUPS[-1].lower_age
_AGE_BY_LABEL = {g.label: g for g in AGE_GROUPS}


@dataclass(frozen=True)
class CauseGroup:
    index: int
    code: str
    name: str
    icd10_ranges: tuple[tuple[str, str], ...]

    def contains(self, prefix: str) -> bool:
        return any(lo <= prefix <= hi for lo, hi in self.icd10_ranges)


_CAUSE_TABLE = [
    ("CAN", "Cancers", (("C00", "D49"),)),
    ("CIR", "Circulatory", (("I00", "I99"),)),
    ("DIG", "Digestive", (("K00", "K95"),)),
    ("END", "Endocrine and Blood", (("D50", "D89"), ("E00", "E89"))),
    ("EXT", "External", (("V00", "Y99"),)),
    ("GEN", "Genitourinary", (("N00", "N99"),)),
    ("INF", "Infectious", (("A00", "B99"),)),
    ("MEN", "Mental", (("F01", "F99"),)),
    ("MUS", "Musculoskeletal and Skin", (("M00", "M99"), ("L00", "L99"))),
    ("NER", "Nervous", (("G00", "G99"), ("H00", "H59"), ("H60", "H95"))),
    ("RES", "Respiratory", (("J00", "J99"),)),
    (
        "OTH",
        "Other",
        (
            ("O00", "O9A"),
            ("P00", "P96"),
            ("Q00", "Q99"),
            ("R00", "R99"),
            ("S00", "T88"),
            ("Z00", "Z99"),
        ),
    ),
]
CAUSE_GROUPS: tuple[CauseGroup, ...] = tuple(
    CauseGroup(i, code, name, ranges) for i, (code, name, ranges) in enumerate(_CAUSE_TABLE)
)
CAUSE_CODES: tuple[str, ...] = tuple(c.code for c in CAUSE_GROUPS)
N_CAUSES = len(CAUSE_GROUPS)
ALL = "ALL"
_CAUSE_BY_CODE = {c.code: c for c in CAUSE_GROUPS}

_ICD10_RE = re.compile(r"^([A-Z])(\d)([0-9A-Z])(?:\.?([0-9A-Z]{1,4}))?$")

AgeLike = Union[AgeGroup, str, int]
CauseLike = Union[CauseGroup, str, int]


def age_group(x: AgeLike) -> AgeGroup:
    if isinstance(x, AgeGroup):
        return x
    if isinstance(x, (int, np.integer)):
        if not 0 <= x < N_AGES:
            raise IndexError(f"age index {x} out of range")
        return AGE_GROUPS[int(x)]
    try:
        return _AGE_BY_LABEL[str(x).strip()]
    except KeyError:
        raise InputError(f"unknown age group {x!r}") from None


def cause_group(c: CauseLike) -> CauseGroup:
    if isinstance(c, CauseGroup):
        return c
    if isinstance(c, (int, np.integer)):
        if not 0 <= c < N_CAUSES:
            raise IndexError(f"cause index {c} out of range")
        return CAUSE_GROUPS[int(c)]
    try:
        return _CAUSE_BY_CODE[str(c).strip().upper()]
    except KeyError:
        raise InputError(f"unknown cause group {c!r}") from None


def parse_cause_code(icd10: str) -> CauseGroup:
    """Map an ICD-10 code such as ``"I25.1"`` to its cause group.

    Only the letter and first two characters take part in the lookup.
    Codes outside every group range raise :class:`UnknownCode`.
    """
    if not isinstance(icd10, str):
        raise MalformedCode(f"ICD-10 code must be a string, got {type(icd10).__name__}")
    m = _ICD10_RE.match(icd10.strip().upper())
    if m is None:
        raise MalformedCode(f"malformed ICD-10 code {icd10!r}")
    prefix = m.group(1) + m.group(2) + m.group(3)
    for group in CAUSE_GROUPS:
        if group.contains(prefix):
            return group
    raise UnknownCode(f"ICD-10 code {icd10!r} is not covered by any cause group")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MortalityDataset:
    """Deaths ``[age, cause, year]`` and exposures ``[age, year]`` for one sex."""

    sex: str
    years: tuple[int, ...]
    deaths: np.ndarray
    exposures: np.ndarray

    def __post_init__(self):
        if self.sex not in SEXES:
            raise InputError(f"sex must be one of {SEXES}, got {self.sex!r}")
        years = tuple(int(y) for y in self.years)
        if any(b - a != 1 for a, b in zip(years, years[1:])) or not years:
            raise InputError("years must be a non-empty run of consecutive integers")
        n = len(years)
        deaths = np.asarray(self.deaths)
        exposures = np.asarray(self.exposures, dtype=float)
        if deaths.shape != (N_AGES, N_CAUSES, n):
            raise InputError(f"deaths grid has shape {deaths.shape}, expected {(N_AGES, N_CAUSES, n)}")
        if exposures.shape != (N_AGES, n):
            raise InputError(f"exposure grid has shape {exposures.shape}, expected {(N_AGES, n)}")
        if deaths.dtype.kind == "f":
            if not np.all(np.isfinite(deaths)) or np.any(deaths != np.round(deaths)):
                raise InputError("deaths must be integral")
        if np.any(deaths < 0):
            raise InputError("deaths must be non-negative")
        if not np.all(np.isfinite(exposures)) or np.any(exposures <= 0):
            raise InputError("exposures must be positive and finite")
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "deaths", _readonly(deaths.astype(np.int64)))
        object.__setattr__(self, "exposures", _readonly(exposures))

    def __eq__(self, other):
        if not isinstance(other, MortalityDataset):
            return NotImplemented
        return (
            self.sex == other.sex
            and self.years == other.years
            and np.array_equal(self.deaths, other.deaths)
            and np.array_equal(self.exposures, other.exposures)
        )

    __hash__ = None

    def year_index(self, t: int) -> int:
        i = int(t) - self.years[0]
        if not 0 <= i < len(self.years):
            raise IndexError(f"year {t} outside {self.years[0]}..{self.years[-1]}")
        return i

    @property
    def all_cause_deaths(self) -> np.ndarray:
        return self.deaths.sum(axis=1)


@dataclass(frozen=True, eq=False)
class StandardPopulation:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (N_AGES,):
            raise InputError(f"standard population needs {N_AGES} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise InputError("standard population weights must be positive")
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.weights.sum()


def load_standard_population(path: str | Path | None = None) -> StandardPopulation:
    """Read ``age_group,weight`` rows; defaults to the bundled ESP 2013 file."""
    if path is None:
        text = resources.files("causemort.data").joinpath("esp2013.csv").read_text("utf-8")
        name = "esp2013.csv"
    else:
        text = Path(path).read_text("utf-8")
        name = str(path)
    rows = list(csv.reader(text.splitlines()))
    if not rows or [h.strip() for h in rows[0]] != ["age_group", "weight"]:
        raise SchemaError("expected header 'age_group,weight'", name, 1)
    weights: dict[int, float] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise SchemaError("expected 2 fields", name, lineno)
        try:
            g = age_group(row[0])
            w = float(row[1])
        except (InputError, ValueError) as exc:
            raise SchemaError(str(exc), name, lineno) from None
        if g.index in weights:
            raise SchemaError(f"duplicate age group {g.label}", name, lineno)
        weights[g.index] = w
    missing = [AGE_GROUPS[i].label for i in range(N_AGES) if i not in weights]
    if missing:
        raise GapError(f"missing weights for {', '.join(missing)}", name)
    return StandardPopulation(np.array([weights[i] for i in range(N_AGES)]))


# --------------------------------------------------------------------------
# observed rates


def observed_rates(ds: MortalityDataset) -> np.ndarray:
    """Cause-specific rates ``d / E`` with shape ``[age, cause, year]``."""
    return ds.deaths / ds.exposures[:, None, :]


def observed_rate(ds: MortalityDataset, x: AgeLike, c: CauseLike | str, t: int) -> float:
    a = age_group(x).index
    j = ds.year_index(t)
    if isinstance(c, str) and c.upper() == ALL:
        return float(ds.deaths[a, :, j].sum() / ds.exposures[a, j])
    return float(ds.deaths[a, cause_group(c).index, j] / ds.exposures[a, j])


def standardize(rates: np.ndarray, sp: StandardPopulation) -> np.ndarray:
    """Weighted mean over the leading (age) axis using standard weights."""
    rates = np.asarray(rates, dtype=float)
    w = sp.weights.reshape((N_AGES,) + (1,) * (rates.ndim - 1))
    return (rates * w).sum(axis=0) / sp.weights.sum()


def observed_asmr(ds: MortalityDataset, sp: StandardPopulation, t: int) -> float:
    j = ds.year_index(t)
    m = ds.deaths[:, :, j].sum(axis=1) / ds.exposures[:, j]
    return float(standardize(m, sp))


# --------------------------------------------------------------------------
# CSV ingestion

DEATHS_HEADER = ["sex", "year", "age_group", "cause", "deaths"]
DEATHS_HEADER_ICD = ["sex", "year", "age_group", "icd10", "deaths"]
EXPOSURES_HEADER = ["sex", "year", "age_group", "population"]
CauseCoding = Literal["auto", "group", "icd10"]


@dataclass
class Issue:
    severity: Literal["error", "warning"]
    kind: type
    message: str
    path: str
    line: int | None = None

    def __str__(self) -> str:
        where = f"{self.path}:{self.line}" if self.line is not None else self.path
        return f"{where}: {self.severity}: {self.message}"

    def to_exception(self) -> Exception:
        if issubclass(self.kind, SchemaError):
            return self.kind(self.message, self.path, self.line)
        return self.kind(f"{self.path}:{self.line}: {self.message}")


@dataclass
class LoadReport:
    issues: list[Issue] = field(default_factory=list)
    merged_rows: int = 0
    rows_read: int = 0

    @property
    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def warnings(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "warning"]


def _parse_sex(value: str) -> str:
    v = value.strip().lower()
    if v not in SEXES:
        raise ValueError(f"unknown sex {value!r}")
    return v


def _parse_year(value: str) -> int:
    v = value.strip()
    if not re.fullmatch(r"\d{4}", v):
        raise ValueError(f"bad year {value!r}")
    return int(v)


def _parse_count(value: str) -> int:
    try:
        x = float(value)
    except ValueError:
        raise ValueError(f"bad death count {value!r}") from None
    if not math.isfinite(x) or x < 0:
        raise ValueError(f"death count must be a non-negative integer, got {value!r}")
    if x != math.floor(x):
        raise ValueError(f"fractional death count {value!r}")
    return int(x)


def _classify(raw: str, coding: str) -> CauseGroup:
    raw = raw.strip()
    if coding == "group":
        return cause_group(raw)
    if coding == "icd10":
        return parse_cause_code(raw)
    if raw.upper() in _CAUSE_BY_CODE:
        return _CAUSE_BY_CODE[raw.upper()]
    return parse_cause_code(raw)


def _rows(path: Path) -> Iterable[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            yield lineno, row


def read_dataset(
    deaths_path: str | Path,
    exposures_path: str | Path,
    sex: str,
    years: tuple[int, int] = DEFAULT_YEARS,
    coding: CauseCoding = "auto",
) -> tuple[MortalityDataset | None, LoadReport]:
    """Parse both files, collecting every problem instead of stopping at the first.

    Returns ``(None, report)`` if any error was found.
    """
    sex = _parse_sex(sex)
    first, last = int(years[0]), int(years[1])
    n = last - first + 1
    report = LoadReport()
    dpath, epath = str(deaths_path), str(exposures_path)

    def err(kind, msg, path, line=None):
        report.issues.append(Issue("error", kind, msg, path, line))

    deaths = np.zeros((N_AGES, N_CAUSES, n), dtype=np.int64)
    seen: Counter = Counter()
    header_ok = False
    for lineno, row in _rows(Path(deaths_path)):
        if lineno == 1:
            header = [h.strip().lower() for h in row]
            if header == DEATHS_HEADER_ICD:
                row_coding = "icd10"
            elif header == DEATHS_HEADER:
                row_coding = coding
            else:
                err(SchemaError, f"expected header {','.join(DEATHS_HEADER)}", dpath, 1)
                break
            header_ok = True
            continue
        if not row or not "".join(row).strip():
            continue
        if len(row) != 5:
            err(SchemaError, f"expected 5 fields, got {len(row)}", dpath, lineno)
            continue
        try:
            row_sex = _parse_sex(row[0])
            year = _parse_year(row[1])
            g = age_group(row[2])
            c = _classify(row[3], row_coding)
            d = _parse_count(row[4])
        except UnknownCode as exc:
            err(UnknownCode, str(exc), dpath, lineno)
            continue
        except MalformedCode as exc:
            err(MalformedCode, str(exc), dpath, lineno)
            continue
        except (ValueError, InputError) as exc:
            err(SchemaError, str(exc), dpath, lineno)
            continue
        if row_sex != sex:
            continue
        if not first <= year <= last:
            err(RangeError, f"year {year} outside {first}..{last}", dpath, lineno)
            continue
        report.rows_read += 1
        key = (year, g.index, row[3].strip().upper())
        if seen[key]:
            report.merged_rows += 1
        seen[key] += 1
        deaths[g.index, c.index, year - first] += d
    if not header_ok and not report.errors:
        err(SchemaError, "empty deaths file", dpath, 1)
    if report.merged_rows:
        report.issues.append(
            Issue("warning", SchemaError, f"{report.merged_rows} duplicate rows merged by summation", dpath)
        )

    exposures = np.full((N_AGES, n), np.nan)
    header_ok = False
    for lineno, row in _rows(Path(exposures_path)):
        if lineno == 1:
            if [h.strip().lower() for h in row] != EXPOSURES_HEADER:
                err(SchemaError, f"expected header {','.join(EXPOSURES_HEADER)}", epath, 1)
                break
            header_ok = True
            continue
        if not row or not "".join(row).strip():
            continue
        if len(row) != 4:
            err(SchemaError, f"expected 4 fields, got {len(row)}", epath, lineno)
            continue
        try:
            row_sex = _parse_sex(row[0])
            year = _parse_year(row[1])
            g = age_group(row[2])
            pop = float(row[3])
        except (ValueError, InputError) as exc:
            err(SchemaError, str(exc), epath, lineno)
            continue
        if row_sex != sex:
            continue
        if not first <= year <= last:
            err(RangeError, f"year {year} outside {first}..{last}", epath, lineno)
            continue
        if not math.isfinite(pop) or pop <= 0:
            err(SchemaError, f"population must be positive, got {row[3]!r}", epath, lineno)
            continue
        j = year - first
        if not np.isnan(exposures[g.index, j]):
            err(SchemaError, f"duplicate exposure for ({g.label}, {year})", epath, lineno)
            continue
        exposures[g.index, j] = pop
    if header_ok:
        for a, j in zip(*np.nonzero(np.isnan(exposures))):
            err(GapError, f"missing exposure for ({AGE_GROUPS[a].label}, {first + j})", epath)
    elif not any(i.path == epath for i in report.errors):
        err(SchemaError, "empty exposures file", epath, 1)

    if report.errors:
        return None, report
    ds = MortalityDataset(sex, tuple(range(first, last + 1)), deaths, exposures)
    return ds, report


def load_dataset(
    deaths_path: str | Path,
    exposures_path: str | Path,
    sex: str,
    years: tuple[int, int] = DEFAULT_YEARS,
    coding: CauseCoding = "auto",
) -> MortalityDataset:
    ds, report = read_dataset(deaths_path, exposures_path, sex, years, coding)
    if ds is None:
        raise report.errors[0].to_exception()
    return ds


def write_dataset(ds: MortalityDataset, deaths_path: str | Path, exposures_path: str | Path) -> None:
    """Write a dataset with group-coded causes; reloading reproduces it exactly."""
    with open(deaths_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEATHS_HEADER)
        for j, year in enumerate(ds.years):
            for g in AGE_GROUPS:
                for c in CAUSE_GROUPS:
                    w.writerow([ds.sex, year, g.label, c.code, int(ds.deaths[g.index, c.index, j])])
    with open(exposures_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPOSURES_HEADER)
        for j, year in enumerate(ds.years):
            for g in AGE_GROUPS:
                w.writerow([ds.sex, year, g.label, repr(float(ds.exposures[g.index, j]))])


def year_range(first: int, last: int) -> tuple[int, ...]:
    return tuple(range(int(first), int(last) + 1))


def as_years(years: Sequence[int] | np.ndarray) -> np.ndarray:
    return np.asarray(years, dtype=float)
