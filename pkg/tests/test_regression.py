from __future__ import annotations

import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from causemort import regression as r
from causemort.errors import RankDeficient

YEARS = np.arange(2001, 2019)


# --------------------------------------------------------------------------
# Gaussian models


def _fraction_normal_equations(X, y):
    """Solve X'X b = X'y exactly in rationals (Gauss-Jordan)."""
    X = [[Fraction(float(v)) for v in row] for row in X]
    y = [Fraction(float(v)) for v in y]
    p = len(X[0])
    A = [[sum(X[k][i] * X[k][j] for k in range(len(X))) for j in range(p)] for i in range(p)]
    b = [sum(X[k][i] * y[k] for k in range(len(X))) for i in range(p)]
    M = [A[i] + [b[i]] for i in range(p)]
    for c in range(p):
        piv = next(i for i in range(c, p) if M[i][c] != 0)
        M[c], M[piv] = M[piv], M[c]
        M[c] = [v / M[c][c] for v in M[c]]
        for i in range(p):
            if i != c and M[i][c] != 0:
                M[i] = [a - M[i][c] * bb for a, bb in zip(M[i], M[c])]
    return np.array([float(M[i][p]) for i in range(p)])


@pytest.mark.parametrize(
    "kind, eps",
    [("no_break", None), ("continuous_break", 2007), ("continuous_break", 2011), ("discontinuous_break", 2011),
     ("discontinuous_break", 2016)],
)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ols_matches_exact_normal_equations(kind, eps, seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(-4.5, 0.1, size=18)
    spec = r.DesignSpec(kind, tuple(YEARS), eps)
    fit = r.ols_fit(y, spec)
    oracle = _fraction_normal_equations(spec.matrix(), y)
    np.testing.assert_allclose(fit.coefficients, oracle, rtol=1e-10, atol=1e-10)


def test_ols_exact_line():
    y = 3.0 - 0.005 * (YEARS - 2001)
    fit = r.ols_fit(y, r.DesignSpec("no_break", tuple(YEARS)))
    assert fit.coefficients[1] == pytest.approx(-0.005, abs=1e-13)
    assert fit.rss < 1e-24


def test_ols_exact_kink():
    y = -0.028 * (YEARS - 2001) + 0.023 * np.maximum(YEARS - 2011, 0)
    fit = r.ols_fit(y, r.DesignSpec("continuous_break", tuple(YEARS), 2011))
    assert fit.coefficients[2] == pytest.approx(0.023, abs=1e-12)
    assert fit.rss < 1e-24


def test_bic_definition():
    rng = np.random.default_rng(5)
    y = rng.normal(size=18)
    for spec in (r.DesignSpec("no_break", tuple(YEARS)), r.DesignSpec("discontinuous_break", tuple(YEARS), 2010)):
        fit = r.ols_fit(y, spec)
        s2 = fit.rss / 18
        ll = float(np.sum(stats.norm.logpdf(y - spec.matrix() @ fit.coefficients, scale=math.sqrt(s2))))
        assert fit.loglik == pytest.approx(ll, rel=1e-10)
        assert fit.bic == pytest.approx(-2 * ll + (spec.n_coef + 1) * math.log(18), rel=1e-12)


def test_duplicate_column_rejected():
    X = np.column_stack([np.ones(18), YEARS - 2010.0, YEARS - 2010.0])
    with pytest.raises(RankDeficient):
        r.ols_solve(X, np.arange(18.0))


def test_epsilon_presence():
    with pytest.raises(ValueError):
        r.DesignSpec("no_break", tuple(YEARS), 2011)
    with pytest.raises(ValueError):
        r.DesignSpec("continuous_break", tuple(YEARS))


def test_short_series_rejected():
    with pytest.raises(ValueError):
        r.ols_fit(np.zeros(4), r.DesignSpec("discontinuous_break", (2001, 2002, 2003, 2004), 2003))


# --------------------------------------------------------------------------
# NB log-likelihood


def test_loglik_zero_count():
    theta, mu = 3.7, 12.5
    beta = [math.log(mu), 0, 0, 0]
    got = r.nb_loglik(beta, theta, [0], [0.0], [2001])
    assert got == pytest.approx(theta * math.log(theta / (theta + mu)), rel=1e-13)


def test_loglik_matches_scipy_pmf():
    rng = np.random.default_rng(1)
    beta = np.array([60.0, -0.032, 0.02, 0.05])
    off = np.log(rng.uniform(1e4, 1e5, 18))
    mu = np.exp(off + r.nb_design(YEARS) @ beta)
    y = rng.poisson(mu)
    theta = 7.5
    want = stats.nbinom.logpmf(y, theta, theta / (theta + mu)).sum()
    assert r.nb_loglik(beta, theta, y, off, YEARS) == pytest.approx(want, rel=1e-12)


def test_loglik_poisson_limit():
    rng = np.random.default_rng(2)
    beta = np.array([math.log(2e-3) + 0.021 * 2001, -0.021, 0.01, 0.0])
    off = np.full(18, math.log(1e4))
    mu = np.exp(off + r.nb_design(YEARS) @ beta)
    assert 1 < mu.mean() < 100
    y = rng.poisson(mu)
    pois = stats.poisson.logpmf(y, mu).sum()
    assert abs(r.nb_loglik(beta, 1e9, y, off, YEARS) - pois) < 1e-4


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(0.3, 5e4),
)
def test_score_matches_central_differences(seed, theta):
    rng = np.random.default_rng(seed)
    beta = np.array([rng.uniform(30, 70), rng.uniform(-0.04, 0.0), rng.uniform(-0.03, 0.03), rng.uniform(-0.1, 0.1)])
    beta[0] = math.log(rng.uniform(1e-4, 1e-2)) - beta[1] * 2001
    off = np.log(rng.uniform(1e3, 1e6, 18))
    mu = np.exp(off + r.nb_design(YEARS) @ beta)
    y = rng.poisson(mu)
    g = r.nb_score(beta, theta, y, off, YEARS)
    x0 = np.append(beta, theta)

    def f(x):
        return r.nb_loglik(x[:4], x[4], y, off, YEARS)

    for i in range(5):
        # column 1 multiplies calendar years, so its step is scaled down
        h = (1e-6 if i != 1 else 1e-9) * max(1.0, abs(x0[i]))
        if i == 4:
            h = 1e-5 * theta
        e = np.zeros(5)
        e[i] = h
        fd = (f(x0 + e) - f(x0 - e)) / (2 * h)
        scale = max(abs(g[i]), 1e-3 * (abs(f(x0)) / max(abs(x0[i]), 1.0)))
        assert abs(fd - g[i]) <= 1e-5 * scale + 1e-6, (i, fd, g[i])


@pytest.mark.parametrize("seed", range(6))
def test_loglik_concave_in_beta(seed):
    rng = np.random.default_rng(seed)
    y = rng.poisson(rng.uniform(5, 500), 18)
    off = np.log(np.full(18, 1e5))
    theta = rng.uniform(1, 1e3)
    b = np.array([math.log(max(y.mean(), 1) / 1e5) + 0.02 * 2001, -0.02, 0.0, 0.0])
    for _ in range(20):
        d = rng.normal(size=4) * np.array([1e-2, 1e-5, 1e-3, 1e-2])
        f0 = r.nb_loglik(b, theta, y, off, YEARS)
        fp = r.nb_loglik(b + d, theta, y, off, YEARS)
        fm = r.nb_loglik(b - d, theta, y, off, YEARS)
        assert fp + fm - 2 * f0 <= 1e-9 * abs(f0)


@pytest.mark.parametrize(
    "mu, theta, want",
    [(1000, 1000, 2.0), (5.0, math.inf, 1.0), (0.0, 3.0, 1.0), (50.0, 1e12, 1.0 + 5e-11)],
)
def test_dispersion_ratio(mu, theta, want):
    assert r.dispersion_ratio(mu, theta) == pytest.approx(want, rel=1e-15)


# --------------------------------------------------------------------------
# NB fitting


def _simulate(beta, theta, E, rng, reps=1):
    years = np.tile(YEARS, reps)
    E = np.tile(E, reps)
    mu = E * np.exp(r.nb_design(years) @ beta)
    lam = rng.gamma(theta, mu / theta) if math.isfinite(theta) else mu
    return rng.poisson(lam), E, years


TRUE_BETA = np.array([math.log(2e-3) + 0.025 * 2001, -0.025, 0.015, 0.03])


def test_all_zero_counts_zeroed():
    f = r.nb_glm_fit(np.zeros(18), np.full(18, 1e5), YEARS)
    assert f.zeroed and f.beta is None and f.theta is None


def test_mean_below_one_zeroed():
    y = np.zeros(18)
    y[:17] = 1  # mean 17/18 < 1
    assert r.nb_glm_fit(y, np.full(18, 1e5), YEARS).zeroed
    y[17] = 1
    assert not r.nb_glm_fit(y, np.full(18, 1e5), YEARS).zeroed


def test_matches_statsmodels_nb():
    sm = pytest.importorskip("statsmodels.api")
    rng = np.random.default_rng(8)
    E = np.full(18, 2e5)
    y, E, years = _simulate(TRUE_BETA, 40.0, E, rng)
    fit = r.nb_glm_fit(y, E, years)
    assert fit.converged and not fit.theta_capped
    X = r.nb_design(years, center=2009.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = sm.NegativeBinomial(y, X, offset=np.log(E)).fit(disp=0, method="bfgs", maxiter=5000)
    b = ref.params[:4].copy()
    b[0] -= 2009.5 * b[1]
    np.testing.assert_allclose(fit.beta[1:], b[1:], rtol=1e-3, atol=1e-6)
    assert fit.beta[0] == pytest.approx(b[0], abs=1e-3)
    assert fit.theta == pytest.approx(1 / ref.params[4], rel=1e-4)
    assert fit.loglik >= ref.llf - 1e-9


def test_poisson_data_hits_cap_and_matches_poisson_glm():
    sm = pytest.importorskip("statsmodels.api")
    rng = np.random.default_rng(9)
    E = np.full(18, 5e5)
    y, E, years = _simulate(TRUE_BETA, math.inf, E, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = r.nb_glm_fit(y, E, years)
    X = r.nb_design(years, center=2009.5)
    ref = sm.GLM(y, X, family=sm.families.Poisson(), offset=np.log(E)).fit(tol=1e-14).params
    ref[0] -= 2009.5 * ref[1]
    np.testing.assert_allclose(fit.beta, ref, atol=1e-4)
    assert fit.theta_capped and fit.theta == r.THETA_CAP
    assert "theta_capped" in fit.notes


def test_converged_score_small_and_fd_consistent():
    rng = np.random.default_rng(10)
    E = np.full(18, 1e5)
    y, E, years = _simulate(TRUE_BETA, 25.0, E, rng)
    fit = r.nb_glm_fit(y, E, years)
    assert fit.converged and fit.score_norm < 1e-6
    off = np.log(E)
    g = r.nb_score(fit.beta, fit.theta, y, off, years)
    # every coordinate of the score is tiny relative to the total count
    assert np.max(np.abs(g[[0, 2, 3]])) / y.sum() < 1e-6
    assert abs(g[4]) * fit.theta / y.sum() < 1e-6


def test_deterministic():
    rng = np.random.default_rng(11)
    y, E, years = _simulate(TRUE_BETA, 60.0, np.full(18, 3e5), rng)
    a = r.nb_glm_fit(y, E, years)
    b = r.nb_glm_fit(y.copy(), E.copy(), years.copy())
    assert a.beta.tobytes() == b.beta.tobytes()
    assert a.theta == b.theta and a.cov.tobytes() == b.cov.tobytes()


@pytest.mark.parametrize("k", [0.5, 2.0, 10.0])
def test_exposure_scaling_shifts_intercept(k):
    rng = np.random.default_rng(12)
    y, E, years = _simulate(TRUE_BETA, 80.0, np.full(18, 2e5), rng)
    a = r.nb_glm_fit(y, E, years)
    b = r.nb_glm_fit(y, E * k, years)
    assert a.beta[0] - b.beta[0] == pytest.approx(math.log(k), abs=1e-8)
    np.testing.assert_allclose(b.beta[1:], a.beta[1:], rtol=1e-7, atol=1e-10)
    assert b.theta == pytest.approx(a.theta, rel=1e-7)


def test_wald_p_values():
    rng = np.random.default_rng(13)
    y, E, years = _simulate(TRUE_BETA, 30.0, np.full(18, 2e5), rng)
    f = r.nb_glm_fit(y, E, years)
    z = f.beta / f.se
    np.testing.assert_allclose(f.p_values, 2 * stats.norm.sf(np.abs(z)), rtol=1e-12)
    assert f.cov.shape == (4, 4)
    np.testing.assert_allclose(f.cov, f.cov.T, rtol=1e-12)


def test_nonconvergence_flagged_not_raised():
    rng = np.random.default_rng(14)
    y, E, years = _simulate(TRUE_BETA, 30.0, np.full(18, 2e5), rng)
    with pytest.warns(RuntimeWarning):
        f = r.nb_glm_fit(y, E, years, max_iter=1)
    assert not f.converged and "nonconvergence" in f.notes


def test_alternative_breakpoint():
    rng = np.random.default_rng(15)
    y, E, years = _simulate(TRUE_BETA, 50.0, np.full(18, 2e5), rng)
    f = r.nb_glm_fit(y, E, years, breakpoint=2009)
    assert f.converged and f.breakpoint == 2009


@pytest.mark.parametrize("bad", ["neg_exposure", "fractional", "misaligned"])
def test_bad_inputs(bad):
    y, E = np.full(18, 10.0), np.full(18, 1e4)
    years = YEARS
    if bad == "neg_exposure":
        E[3] = -1
    elif bad == "fractional":
        y[2] = 1.5
    else:
        years = YEARS[:-1]
    with pytest.raises(ValueError):
        r.nb_glm_fit(y, E, years)


def test_small_counts_fit():
    rng = np.random.default_rng(16)
    beta = np.array([math.log(2e-5) + 0.02 * 2001, -0.02, 0.01, 0.0])
    y, E, years = _simulate(beta, 5.0, np.full(18, 1e5), rng)
    if y.mean() < 1:
        pytest.skip("draw fell under the zero rule")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f = r.nb_glm_fit(y, E, years)
    assert np.all(np.isfinite(f.beta))
    assert f.score_norm < 1e-6
