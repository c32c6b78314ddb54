"""Gaussian breakpoint regressions and the negative binomial GLM.

The NB model for one (age, cause) cell is

    log m_t = b0 + b1 t + (b2 (t - bp) + b3) I(t >= bp),
    D_t ~ NB(mean = E_t m_t, dispersion theta),   Var = mu + mu^2 / theta.

Coefficients are reported in calendar-year units (``t`` is the year itself);
internally the fit runs on a centred time column for conditioning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import special, stats

from .errors import RankDeficient

BREAK_YEAR = 2011
THETA_CAP = 1e7
THETA_FLOOR = 1e-8
MAX_OUTER = 200
DEVIANCE_TOL = 1e-8
SCORE_TOL = 1e-6

Kind = Literal["no_break", "continuous_break", "discontinuous_break"]
_N_COEF = {"no_break": 2, "continuous_break": 3, "discontinuous_break": 4}


# --------------------------------------------------------------------------
# Gaussian models


@dataclass(frozen=True)
class DesignSpec:
    kind: Kind
    years: tuple[int, ...]
    epsilon: int | None = None

    def __post_init__(self):
        if self.kind not in _N_COEF:
            raise ValueError(f"unknown design kind {self.kind!r}")
        if (self.epsilon is None) != (self.kind == "no_break"):
            raise ValueError("epsilon is required exactly when a break is modelled")
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))

    @property
    def n_coef(self) -> int:
        return _N_COEF[self.kind]

    def matrix(self, center: float = 0.0) -> np.ndarray:
        """Design columns ``1, t, (t - eps) I(t >= eps)[, I(t >= eps)]``.

        ``center`` shifts only the plain time column.
        """
        t = np.asarray(self.years, dtype=float)
        cols = [np.ones_like(t), t - center]
        if self.kind != "no_break":
            post = (t >= self.epsilon).astype(float)
            cols.append((t - self.epsilon) * post)
            if self.kind == "discontinuous_break":
                cols.append(post)
        return np.column_stack(cols)


@dataclass(frozen=True)
class GaussianFit:
    spec: DesignSpec
    coefficients: np.ndarray
    rss: float
    sigma2_mle: float
    loglik: float
    bic: float
    n: int

    @property
    def k(self) -> int:
        return self.spec.n_coef + 1


def ols_solve(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares solution; refuses rank-deficient designs."""
    X = np.asarray(X, dtype=float)
    coef, _, rank, _ = np.linalg.lstsq(X, np.asarray(y, dtype=float), rcond=None)
    if rank < X.shape[1]:
        raise RankDeficient(f"design matrix has rank {rank} < {X.shape[1]} columns")
    return coef


def ols_fit(y: Sequence[float], spec: DesignSpec) -> GaussianFit:
    """Fit ``y ~ Normal(X beta, sigma^2)`` and score it by BIC.

    BIC counts the regression coefficients plus the variance and uses
    ``n = len(y)``.  The MLE variance is floored at ``1e-20`` times the
    mean total sum of squares so that exact fits compare by penalty alone
    instead of by rounding noise.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    p = spec.n_coef
    if n != len(spec.years):
        raise ValueError("series and years differ in length")
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} observations for {spec.kind}")
    if spec.epsilon is not None and not spec.years[0] < spec.epsilon <= spec.years[-1]:
        raise ValueError(f"breakpoint {spec.epsilon} not inside {spec.years[0]}..{spec.years[-1]}")
    center = float(np.mean(spec.years))
    ybar = float(y.mean())
    yc = y - ybar
    Xc = spec.matrix(center)
    bc = ols_solve(Xc, yc)
    resid = yc - Xc @ bc
    rss = float(resid @ resid)
    tss = float(yc @ yc)
    sigma2 = max(rss / n, 1e-20 * tss / n, 1e-300)
    loglik = -0.5 * n * math.log(2 * math.pi * sigma2) - rss / (2 * sigma2)
    k = p + 1
    bic = -2.0 * loglik + k * math.log(n)
    coef = bc.copy()
    coef[0] = bc[0] + ybar - bc[1] * center
    return GaussianFit(spec, coef, rss, rss / n, loglik, bic, n)


# --------------------------------------------------------------------------
# negative binomial pieces


def nb_design(years: Sequence[int], breakpoint: int = BREAK_YEAR, center: float = 0.0) -> np.ndarray:
    t = np.asarray(years, dtype=float)
    post = (t >= breakpoint).astype(float)
    return np.column_stack([np.ones_like(t), t - center, (t - breakpoint) * post, post])


def _nb_ll_terms(y, mu, theta):
    # lgamma(y+theta) - lgamma(theta) - lgamma(y+1), stable for huge theta
    lg = -special.betaln(y + 1.0, theta) - np.log(y + theta)
    return lg - theta * np.log1p(mu / theta) - y * np.log1p(theta / mu)


def _poisson_ll_terms(y, mu):
    return special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)


def nb_loglik(
    beta: Sequence[float],
    theta: float,
    counts: Sequence[float],
    offsets: Sequence[float],
    years: Sequence[int],
    breakpoint: int = BREAK_YEAR,
) -> float:
    """Exact NB log-likelihood with ``log mu = offset + X beta``."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    y = np.asarray(counts, dtype=float)
    eta = np.asarray(offsets, dtype=float) + nb_design(years, breakpoint) @ np.asarray(beta, dtype=float)
    return float(np.sum(_nb_ll_terms(y, np.exp(eta), float(theta))))


def _dtheta_terms(y, mu, theta):
    """First and second derivatives of each log-likelihood term in theta."""
    d1 = special.digamma(y + theta) - special.digamma(theta)
    d2 = special.polygamma(1, y + theta) - special.polygamma(1, theta)
    mt = mu + theta
    g = d1 - np.log1p(mu / theta) + (mu - y) / mt
    h = d2 + mu / (theta * mt) - (mu - y) / mt**2
    return g, h


def nb_score(
    beta: Sequence[float],
    theta: float,
    counts: Sequence[float],
    offsets: Sequence[float],
    years: Sequence[int],
    breakpoint: int = BREAK_YEAR,
) -> np.ndarray:
    """Analytic gradient of :func:`nb_loglik` w.r.t. ``(b0, b1, b2, b3, theta)``."""
    y = np.asarray(counts, dtype=float)
    X = nb_design(years, breakpoint)
    mu = np.exp(np.asarray(offsets, dtype=float) + X @ np.asarray(beta, dtype=float))
    u = (y - mu) / (1.0 + mu / theta)
    g_theta, _ = _dtheta_terms(y, mu, theta)
    return np.append(X.T @ u, g_theta.sum())


def dispersion_ratio(mu: float, theta: float) -> float:
    """Variance-to-mean ratio ``1 + mu / theta`` of an NB count."""
    if mu < 0 or not theta > 0:
        raise ValueError("need mu >= 0 and theta > 0")
    if math.isinf(theta):
        return 1.0
    return 1.0 + mu / theta


# --------------------------------------------------------------------------
# fitting


@dataclass(frozen=True, eq=False)
class CellFit:
    """Fitted NB model for one (age, cause) cell.

    ``beta`` is in calendar-year units.  Zeroed cells carry no coefficients
    and always yield a rate of 0.  Coefficients loaded from published tables
    may hold ``nan`` for values that were not reported.
    """

    beta: np.ndarray | None
    theta: float | None
    cov: np.ndarray | None = None
    p_values: np.ndarray | None = None
    converged: bool = True
    zeroed: bool = False
    loglik: float | None = None
    age: int | None = None
    cause: str | None = None
    breakpoint: int = BREAK_YEAR
    theta_capped: bool = False
    iterations: int = 0
    score_norm: float = 0.0
    notes: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.zeroed:
            if self.beta is not None or self.theta is not None:
                raise ValueError("a zeroed cell carries no coefficients")
            return
        b = np.array(self.beta, dtype=float)
        if b.shape != (4,):
            raise ValueError("beta must have four entries")
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)

    @classmethod
    def zero(cls, age=None, cause=None, breakpoint=BREAK_YEAR) -> "CellFit":
        return cls(None, None, converged=True, zeroed=True, age=age, cause=cause, breakpoint=breakpoint)

    @property
    def se(self) -> np.ndarray | None:
        if self.cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def with_beta(self, beta) -> "CellFit":
        """Copy with replaced coefficients (inference fields dropped)."""
        return CellFit(
            np.asarray(beta, dtype=float),
            self.theta,
            converged=self.converged,
            age=self.age,
            cause=self.cause,
            breakpoint=self.breakpoint,
            theta_capped=self.theta_capped,
        )


class _NBCell:
    """Log-likelihood and derivatives in centred coefficients and log theta."""

    def __init__(self, y, offset, X):
        self.y = y
        self.off = offset
        self.X = X

    def mu(self, b):
        return np.exp(np.clip(self.off + self.X @ b, -700.0, 700.0))

    def loglik(self, b, theta):
        mu = self.mu(b)
        if math.isinf(theta):
            return float(np.sum(_poisson_ll_terms(self.y, mu)))
        return float(np.sum(_nb_ll_terms(self.y, mu, theta)))

    def grad_beta(self, b, theta):
        mu = self.mu(b)
        return self.X.T @ ((self.y - mu) / (1.0 + mu / theta))

    def grad_hess(self, b, theta, with_theta=True):
        """Gradient and Hessian in ``(b, log theta)`` (or ``b`` only)."""
        y, X = self.y, self.X
        mu = self.mu(b)
        mt = mu + theta
        u = theta * (y - mu) / mt
        w = mu * theta * (y + theta) / mt**2
        gb = X.T @ u
        Hbb = -(X.T * w) @ X
        if not with_theta:
            return gb, Hbb
        gt, ht = _dtheta_terms(y, mu, theta)
        gphi = theta * gt.sum()
        hphi = gphi + theta**2 * ht.sum()
        hbphi = X.T @ (theta * mu * (y - mu) / mt**2)
        g = np.append(gb, gphi)
        H = np.empty((5, 5))
        H[:4, :4] = Hbb
        H[:4, 4] = H[4, :4] = hbphi
        H[4, 4] = hphi
        return g, H

    def score_norm(self, b, theta, capped):
        scale = max(1.0, float(self.y.sum()))
        if capped or math.isinf(theta):
            g = self.grad_beta(b, theta)
        else:
            g, _ = self.grad_hess(b, theta)
        return float(np.max(np.abs(g))) / scale

    def irls(self, b, theta, max_iter=50):
        """Fisher scoring for beta at fixed theta (``inf`` gives Poisson)."""
        ll = self.loglik(b, theta)
        for _ in range(max_iter):
            mu = self.mu(b)
            w = mu / (1.0 + mu / theta)
            u = (self.y - mu) / (1.0 + mu / theta)
            A = (self.X.T * w) @ self.X
            try:
                step = np.linalg.solve(A, self.X.T @ u)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(A, self.X.T @ u, rcond=None)[0]
            if not np.all(np.isfinite(step)):
                break
            for _ in range(30):
                b_new = b + step
                ll_new = self.loglik(b_new, theta)
                if ll_new >= ll - 1e-12 * abs(ll):
                    break
                step = step / 2
            else:
                break
            done = np.max(np.abs(b_new - b)) < 1e-11 * (1.0 + np.max(np.abs(b)))
            b, ll = b_new, ll_new
            if done:
                break
        return b

    def profile_theta(self, mu, theta0):
        """Root of the theta score at fixed mu, by safeguarded Newton in log theta.

        Returns ``(theta, capped)``.
        """
        y = self.y

        def g_h(phi):
            th = math.exp(phi)
            gt, ht = _dtheta_terms(y, mu, th)
            g = th * gt.sum()
            return g, g + th * th * ht.sum()

        lo, hi = math.log(THETA_FLOOR), math.log(THETA_CAP)
        g_hi, _ = g_h(hi)
        if g_hi >= 0:
            return THETA_CAP, True
        g_lo, _ = g_h(lo)
        if g_lo <= 0:
            return THETA_FLOOR, False
        a, c = lo, hi
        phi = min(max(math.log(theta0), lo), hi)
        for _ in range(200):
            g, h = g_h(phi)
            if g > 0:
                a = phi
            else:
                c = phi
            new = phi - g / h if h < 0 else None
            if new is None or not a < new < c:
                new = 0.5 * (a + c)
            if abs(new - phi) < 1e-13 * max(1.0, abs(phi)) or c - a < 1e-13:
                phi = new
                break
            phi = new
        return math.exp(phi), False

    def newton_polish(self, b, theta, capped, steps=25):
        """Full Newton on (b, log theta), or on b alone when theta is capped."""
        use_theta = not capped
        x = np.append(b, math.log(theta)) if use_theta else b.copy()

        def unpack(v):
            return (v[:4], math.exp(v[4])) if use_theta else (v, theta)

        ll = self.loglik(*unpack(x))
        for _ in range(steps):
            bb, th = unpack(x)
            g, H = self.grad_hess(bb, th, with_theta=use_theta)
            try:
                np.linalg.cholesky(-H)
                step = np.linalg.solve(-H, g)
            except np.linalg.LinAlgError:
                break
            accepted = False
            for _ in range(30):
                cand = x + step
                if use_theta and cand[4] > math.log(THETA_CAP):
                    step = step / 2
                    continue
                ll_new = self.loglik(*unpack(cand))
                if ll_new >= ll - 1e-13 * abs(ll):
                    accepted = True
                    break
                step = step / 2
            if not accepted:
                break
            small = np.max(np.abs(cand - x)) < 1e-14 * (1.0 + np.max(np.abs(x)))
            x, ll = cand, ll_new
            if small:
                break
        return unpack(x)


def _moment_theta(y, mu):
    denom = float(np.sum((y - mu) ** 2 - mu))
    if denom <= 0:
        return THETA_CAP
    return min(max(float(np.sum(mu**2)) / denom, 1e-3), THETA_CAP)


def nb_glm_fit(
    counts: Sequence[float],
    exposures: Sequence[float],
    years: Sequence[int],
    breakpoint: int = BREAK_YEAR,
    *,
    age: int | None = None,
    cause: str | None = None,
    max_iter: int = MAX_OUTER,
) -> CellFit:
    """Fit the breakpoint NB GLM to one cell's annual death counts.

    Cells averaging fewer than one death per observation are zeroed.
    Otherwise beta (Fisher scoring at fixed theta) and theta (Newton on
    the profile score) are updated alternately until the relative change
    in ``-2 loglik`` drops below 1e-8, then a joint Newton step sequence
    polishes the optimum.  Theta is capped at 1e7, beyond which the model
    is numerically Poisson.  ``converged`` additionally requires the score
    max-norm, scaled by total deaths, to be below 1e-6.
    """
    y = np.asarray(counts, dtype=float)
    E = np.asarray(exposures, dtype=float)
    yrs = np.asarray(years, dtype=float)
    if not (y.shape == E.shape == yrs.shape) or y.ndim != 1:
        raise ValueError("counts, exposures and years must be aligned 1-D series")
    if np.any(E <= 0):
        raise ValueError("exposures must be positive")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("counts must be non-negative integers")
    if y.mean() < 1.0:
        return CellFit.zero(age, cause, breakpoint)

    center = float(np.mean(np.unique(yrs)))
    X = nb_design(yrs, breakpoint, center)
    if np.linalg.matrix_rank(X) < 4:
        raise RankDeficient("breakpoint leaves too few years on one side")
    cell = _NBCell(y, np.log(E), X)

    b0 = np.linalg.lstsq(X, np.log((y + 0.5) / E), rcond=None)[0]
    b = cell.irls(b0, math.inf, max_iter=100)
    theta = _moment_theta(y, cell.mu(b))
    capped = False
    dev_old = -2.0 * cell.loglik(b, theta)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        theta, capped = cell.profile_theta(cell.mu(b), theta)
        b = cell.irls(b, theta)
        dev = -2.0 * cell.loglik(b, theta)
        rel = abs(dev - dev_old) / (abs(dev) + 0.1)
        dev_old = dev
        if rel < DEVIANCE_TOL:
            break

    b, theta = cell.newton_polish(b, theta, capped)
    if not capped and theta >= THETA_CAP * (1 - 1e-12):
        theta, capped = THETA_CAP, True
    if capped:
        # the cap is a boundary optimum only if the theta score still points up
        _, capped = cell.profile_theta(cell.mu(b), theta)
        if not capped:
            theta, _ = cell.profile_theta(cell.mu(b), theta)
            b, theta = cell.newton_polish(b, theta, False)
    snorm = cell.score_norm(b, theta, capped)
    ll = cell.loglik(b, theta)
    converged = bool(np.all(np.isfinite(b)) and snorm < SCORE_TOL and iterations < max_iter)

    # observed information -> covariance (beta block of the joint inverse)
    g, H = cell.grad_hess(b, theta, with_theta=not capped)
    try:
        cov_full = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov_full = np.linalg.pinv(-H)
    cov_c = cov_full[:4, :4]
    A = np.eye(4)
    A[0, 1] = -center
    beta = A @ b
    cov = A @ cov_c @ A.T
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        pvals = 2.0 * stats.norm.sf(np.abs(beta / se))

    notes = []
    if capped:
        notes.append("theta_capped")
    if not converged:
        notes.append("nonconvergence")
        warnings.warn(
            f"NB fit did not converge (age={age}, cause={cause}, score={snorm:.2e})",
            RuntimeWarning,
            stacklevel=2,
        )
    return CellFit(
        beta,
        float(theta),
        cov=cov,
        p_values=pvals,
        converged=converged,
        zeroed=False,
        loglik=ll,
        age=age,
        cause=cause,
        breakpoint=breakpoint,
        theta_capped=capped,
        iterations=iterations,
        score_norm=snorm,
        notes=tuple(notes),
    )


def poisson_glm_fit(counts, exposures, years, breakpoint: int = BREAK_YEAR) -> np.ndarray:
    """Calendar-unit coefficients of the same design under a Poisson GLM."""
    y = np.asarray(counts, dtype=float)
    E = np.asarray(exposures, dtype=float)
    yrs = np.asarray(years, dtype=float)
    center = float(np.mean(np.unique(yrs)))
    X = nb_design(yrs, breakpoint, center)
    cell = _NBCell(y, np.log(E), X)
    b0 = np.linalg.lstsq(X, np.log((y + 0.5) / E), rcond=None)[0]
    b = cell.irls(b0, math.inf, max_iter=200)
    b = b.copy()
    b[0] -= b[1] * center
    return b
