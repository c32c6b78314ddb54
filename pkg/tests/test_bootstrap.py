from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causemort import bootstrap as bs
from causemort import scenarios as sc
from causemort import synthetic as sy
from causemort.domain import CAUSE_CODES, N_AGES, N_CAUSES
from causemort.errors import InputError, StatisticFailure

YEARS = np.arange(2001, 2019)


def _flat_surface(rate, theta, zeroed=None):
    beta = np.zeros((N_AGES, N_CAUSES, 4))
    beta[..., 0] = math.log(rate)
    return sy.make_surface("male", beta, theta=theta, zeroed=zeroed)


class _Const:
    name = "const"

    def point(self, surface, exposures):
        return 3.0

    def __call__(self, counts, exposures, surface):
        return 3.0


class _Total:
    name = "total"

    def point(self, surface, exposures):
        return float("nan")

    def __call__(self, counts, exposures, surface):
        return float(counts.sum())


class _Boom:
    name = "boom"

    def point(self, surface, exposures):
        return 0.0

    def __call__(self, counts, exposures, surface):
        raise ZeroDivisionError("boom")


# --------------------------------------------------------------------------
# simulation


def test_zeroed_cells_draw_zero():
    zeroed = np.zeros((N_AGES, N_CAUSES), bool)
    zeroed[:, 3] = True
    zeroed[7] = True
    s = _flat_surface(1e-3, 50.0, zeroed)
    c = bs.simulate_counts(s, sy.flat_exposures(1e6), seed=1, iteration=0)
    assert c.dtype == np.int64 and c.shape == (N_AGES, N_CAUSES, 18)
    assert np.all(c[zeroed] == 0)
    assert np.all(c[~zeroed] > 0)


@pytest.mark.parametrize("theta, mu", [(np.inf, 20.0), (np.inf, 300.0), (5.0, 40.0), (200.0, 400.0)])
def test_count_moments(theta, mu):
    E = sy.flat_exposures(1e5)
    s = _flat_surface(mu / 1e5, theta)
    draws = np.concatenate([bs.simulate_counts(s, E, seed=7, iteration=i).ravel() for i in range(25)])
    assert draws.size > 1e5
    var = mu + (mu * mu / theta if math.isfinite(theta) else 0.0)
    se_mean = math.sqrt(var / draws.size)
    assert abs(draws.mean() - mu) < 5 * se_mean
    # sampling sd of the variance, roughly var * sqrt(2 / n) for near-normal counts
    assert draws.var(ddof=1) == pytest.approx(var, rel=8 * math.sqrt(2 / draws.size) + 0.01)


def test_simulation_deterministic():
    s = _flat_surface(1e-3, 30.0)
    E = sy.flat_exposures(1e5)
    a = bs.simulate_counts(s, E, seed=42, iteration=3)
    b = bs.simulate_counts(s, E, seed=42, iteration=3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, bs.simulate_counts(s, E, seed=42, iteration=4))
    assert not np.array_equal(a, bs.simulate_counts(s, E, seed=43, iteration=3))


def test_exposure_shape_checked():
    with pytest.raises(InputError):
        bs.simulate_counts(_flat_surface(1e-3, 30.0), np.ones((N_AGES, 17)), 0, 0)


# --------------------------------------------------------------------------
# intervals and driver


@settings(max_examples=60, deadline=None)
@given(
    values=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=400),
    level=st.sampled_from([0.5, 0.8, 0.9, 0.95, 0.99]),
)
def test_percentile_interval_is_order_statistic(values, level):
    lo, hi = bs.percentile_interval(values, level)
    assert lo in values and hi in values
    assert lo <= hi
    s = sorted(values)
    n = len(s)
    a = (1 - level) / 2
    # smallest order statistic whose empirical cdf reaches the level
    k_lo = next(k for k in range(1, n + 1) if k / n >= a - 1e-12)
    k_hi = next(k for k in range(1, n + 1) if k / n >= 1 - a - 1e-12)
    assert lo == s[k_lo - 1] and hi == s[k_hi - 1]


def test_single_iteration_degenerate():
    s = _flat_surface(1e-3, 30.0)
    res = bs.bootstrap_ci(s, sy.flat_exposures(1e5), _Total(), bs.BootstrapConfig(iterations=1))
    assert res.ci_low == res.ci_high == res.replicates[0]


def test_constant_statistic():
    s = _flat_surface(1e-3, 30.0)
    res = bs.bootstrap_ci(s, sy.flat_exposures(1e5), _Const(), bs.BootstrapConfig(iterations=20))
    assert (res.point, res.ci_low, res.ci_high) == (3.0, 3.0, 3.0)


def test_failure_reports_iteration():
    s = _flat_surface(1e-3, 30.0)
    with pytest.raises(StatisticFailure) as info:
        bs.bootstrap_replicates(s, sy.flat_exposures(1e5), _Boom(), 5, seed=0)
    assert info.value.iteration == 0
    assert isinstance(info.value.__cause__, ZeroDivisionError)


def test_replicate_is_function_of_seed_and_index():
    s = _flat_surface(1e-3, 30.0)
    E = sy.flat_exposures(1e5)
    reps = bs.bootstrap_replicates(s, E, _Total(), 12, seed=9)
    for i in (0, 5, 11):
        assert reps[i] == bs.simulate_counts(s, E, 9, i).sum()
    # a shorter run is a prefix of a longer one
    np.testing.assert_array_equal(bs.bootstrap_replicates(s, E, _Total(), 6, seed=9), reps[:6])


def test_thread_count_invariance(demo_truth, sp):
    stat = bs.make_statistic("w", sp)
    E = sy.flat_exposures(2e6)
    one = bs.bootstrap_replicates(demo_truth, E, stat, 16, seed=5, workers=1)
    four = bs.bootstrap_replicates(demo_truth, E, stat, 16, seed=5, workers=4)
    assert one.tobytes() == four.tobytes()


@pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"level": 1.0}, {"level": 0.0}, {"seed": -1}])
def test_config_validation(kwargs):
    with pytest.raises(InputError):
        bs.BootstrapConfig(**kwargs)


# --------------------------------------------------------------------------
# statistics


@pytest.mark.parametrize(
    "name", ["w", "v0", "v65", "rho:CIR", "phi0:res", "phi65:CAN", "asmr:2015", "le0:2018", "le65:2011"]
)
def test_statistic_names(name, sp):
    assert bs.make_statistic(name, sp).name == name


@pytest.mark.parametrize("name", ["x", "rho", "rho:ZZZ", "asmr", "asmr:abc", "v30", "w:CIR"])
def test_statistic_names_rejected(name, sp):
    with pytest.raises(InputError):
        bs.make_statistic(name, sp)


def test_point_values_match_library(demo_truth, sp):
    from causemort import lifetable as lt

    E = sy.flat_exposures(2e6)
    assert bs.make_statistic("w", sp).point(demo_truth, E) == pytest.approx(
        sc.scenario_w(demo_truth, sc.UNADJUSTED, sp), rel=1e-12
    )
    _, _, _, rho = sc.contribution_table(demo_truth, sp)
    assert bs.make_statistic("rho:CIR", sp).point(demo_truth, E) == pytest.approx(rho["CIR"], rel=1e-12)
    assert bs.make_statistic("v65", sp).point(demo_truth, E) == pytest.approx(
        lt.scenario_v(demo_truth, sc.UNADJUSTED, 65), rel=1e-12
    )


def test_unadjusted_replicate_rates_are_raw(demo_truth):
    E = sy.flat_exposures(2e6)
    counts = bs.simulate_counts(demo_truth, E, 3, 0)
    years = np.arange(2011, 2019)
    r = bs.replicate_rates(counts, E, demo_truth, sc.UNADJUSTED, years)
    np.testing.assert_array_equal(r, counts[:, :, 10:] / E[:, None, 10:])


def test_adjusted_replicate_rates_drop_beta2(demo_truth):
    from causemort.regression import nb_glm_fit

    E = sy.flat_exposures(2e6)
    counts = bs.simulate_counts(demo_truth, E, 3, 0)
    years = np.arange(2011, 2019)
    spec = sc.ScenarioSpec("cause", "CIR")
    r = bs.replicate_rates(counts, E, demo_truth, spec, years)
    k = CAUSE_CODES.index("CIR")
    f = nb_glm_fit(counts[12, k], E[12], YEARS)
    want = np.exp(f.beta[0] + f.beta[1] * years + f.beta[3])
    np.testing.assert_allclose(r[12, k], want, rtol=1e-12)
    other = [c for c in range(N_CAUSES) if c != k]
    np.testing.assert_array_equal(r[:, other], (counts[:, :, 10:] / E[:, None, 10:])[:, other])


def test_rho_replicates_centre_on_truth(demo_truth, sp):
    stat = bs.make_statistic("rho:CIR", sp)
    E = sy.flat_exposures(2e6)
    res = bs.bootstrap_ci(demo_truth, E, stat, bs.BootstrapConfig(iterations=8, seed=1))
    assert res.point == 1.0
    assert np.all(np.abs(res.replicates - 1.0) < 0.25)


def test_writers(tmp_path):
    res = bs.BootstrapResult("w", 0.01, 0.005, 0.02, 0.95, 3, 7, np.array([0.01, 0.02, 0.005]))
    bs.write_replicates(res, tmp_path / "r.csv")
    bs.write_summary(res, tmp_path / "s.json")
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert rows == [["iteration", "value"], ["0", "0.01"], ["1", "0.02"], ["2", "0.005"]]
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc == {"statistic": "w", "point": 0.01, "level": 0.95, "ci_low": 0.005, "ci_high": 0.02,
                   "iterations": 3, "seed": 7}
