"""Stage 1: recurrent-visit rate model with a multiplicative lognormal frailty.

Fits a proportional rate model for visit times by partial likelihood
(Breslow tie handling), extracts the baseline cumulative rate, estimates
the frailty variance from the first two moments of the visit counts, and
computes a Gaussian (Laplace) approximation to each subject's frailty
posterior for use by the downstream stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Cohort, DataError, covariate_at

SCORE_TOL = 1e-8
MODE_TOL = 1e-10
MAX_ITER = 100


class FitError(RuntimeError):
    """Raised when an estimation stage fails to converge or is degenerate."""


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous nondecreasing step function, zero before the first knot."""

    knots: np.ndarray
    cumvalues: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        cum = np.asarray(self.cumvalues, dtype=float)
        if knots.shape != cum.shape:
            raise ValueError("knots and cumulative values must align")
        if knots.size and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "cumvalues", cum)

    def __call__(self, t):
        idx = np.searchsorted(self.knots, t, side="right") - 1
        vals = np.concatenate(([0.0], self.cumvalues))
        out = vals[np.asarray(idx) + 1]
        return float(out) if np.isscalar(t) else out

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.cumvalues, prepend=0.0)


@dataclass(frozen=True)
class EBPosterior:
    """Gaussian approximation to one subject's frailty posterior on the log scale."""

    mu_u: float
    s_u_sq: float


@dataclass(frozen=True)
class VisitingFit:
    gamma: np.ndarray
    baseline: StepFunction
    sigma_eta_sq: float
    sigma_sq: float
    mu0: float
    nu: np.ndarray
    eb: tuple
    convergence: dict = field(default_factory=dict)

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma_sq))

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.tolist(),
            "baseline_knots": self.baseline.knots.tolist(),
            "baseline_cum": self.baseline.cumvalues.tolist(),
            "sigma_eta_sq": self.sigma_eta_sq,
            "sigma_sq": self.sigma_sq,
            "mu0": self.mu0,
            "nu": self.nu.tolist(),
            "eb_mu": [p.mu_u for p in self.eb],
            "eb_s_sq": [p.s_u_sq for p in self.eb],
            "convergence": dict(self.convergence),
        }


def _visiting_design(cohort: Cohort) -> np.ndarray:
    """Baseline covariate matrix for the rate model, one row per subject."""
    spec = cohort.covariate_spec
    for col in spec.columns("visiting"):
        for subj in cohort.subjects:
            series = subj.covariates.get(col)
            if series is None:
                raise DataError(f"subject {subj.id!r} is missing covariate {col!r}")
            if not series.is_constant:
                raise DataError(f"visiting covariate {col!r} must be baseline-constant (subject {subj.id!r})")
    return np.array([covariate_at(s, "visiting", 0.0, spec) for s in cohort.subjects])


def _pooled_visits(cohort: Cohort):
    """All visit times with their subject indices, sorted descending by time."""
    times = np.concatenate([s.visits for s in cohort.subjects]) if cohort.n else np.empty(0)
    owner = np.concatenate([np.full(s.m, i) for i, s in enumerate(cohort.subjects)]) if cohort.n else np.empty(0, int)
    order = np.argsort(-times, kind="stable")
    return times[order], owner[order].astype(int)


def _partial_loglik_parts(gamma, X, censor, ev_times, ev_owner):
    """Log partial likelihood with score and information, Breslow ties.

    Risk-set sums S0, S1, S2 are cumulative sums over subjects sorted by
    decreasing censoring time, gathered at each distinct visit time; tied
    visits share a risk set.  S0 and S1 run in extended precision: plain
    float64 cumulative sums accumulate error linearly in n, which puts a
    floor of roughly n^2 * eps on the achievable score norm, above the 1e-8
    convergence gate once cohorts reach a few tens of thousands of visits.
    """
    eta = X @ gamma
    order = np.argsort(-censor, kind="stable")
    w = np.exp(eta[order])
    Xs = X[order]
    Xw = w[:, None] * Xs
    cw = np.cumsum(w.astype(np.longdouble))
    cwx = np.cumsum(Xw.astype(np.longdouble), axis=0)
    cwxx = np.cumsum(np.einsum("ni,nj->nij", Xw, Xs), axis=0)

    ut, counts = np.unique(ev_times, return_counts=True)
    ridx = np.searchsorted(-censor[order], -ut, side="right") - 1
    if np.any(ridx < 0):
        raise FitError("empty risk set at a visit time")
    s0 = cw[ridx]
    if np.any(s0 <= 0):
        raise FitError("empty risk set at a visit time")
    xbar = cwx[ridx] / s0[:, None]
    loglik = float(eta[ev_owner].sum() - counts @ np.log(s0.astype(float)))
    score = (X[ev_owner].sum(axis=0) - counts @ xbar).astype(float)
    xbar = xbar.astype(float)
    info = np.einsum("k,kij->ij", counts, cwxx[ridx] / s0[:, None, None].astype(float))
    info -= np.einsum("k,ki,kj->ij", counts, xbar, xbar)
    return loglik, score, info


def fit_rate_model(cohort: Cohort, *, full_output: bool = False):
    """Estimate the visit-rate regression coefficients.

    Newton iterations with step halving on the semiparametric partial
    likelihood; converged when the summed score has norm below 1e-8.
    """
    X = _visiting_design(cohort)
    n, d = X.shape
    censor = np.array([s.censoring_time for s in cohort.subjects])
    ev_times, ev_owner = _pooled_visits(cohort)
    if ev_times.size == 0:
        raise FitError("cannot fit the visit-rate model: cohort has no visits")
    if d == 0:
        gamma = np.zeros(0)
        info = {"iterations": 0, "score_norm": 0.0}
        return (gamma, info) if full_output else gamma

    gamma = np.zeros(d)
    loglik, score, fisher = _partial_loglik_parts(gamma, X, censor, ev_times, ev_owner)
    iters = 0
    while np.linalg.norm(score) >= SCORE_TOL:
        iters += 1
        if iters > MAX_ITER:
            raise FitError(f"visit-rate model did not converge in {MAX_ITER} iterations (|score|={np.linalg.norm(score):.3g})")
        try:
            step = np.linalg.solve(fisher, score)
        except np.linalg.LinAlgError:
            evals, evecs = np.linalg.eigh(fisher)
            null = evecs[:, int(np.argmin(evals))]
            raise FitError(f"visit-rate information matrix is singular; flat direction {np.round(null, 4).tolist()}") from None
        scale = 1.0
        for _ in range(50):
            cand = gamma + scale * step
            new_ll, new_score, new_fisher = _partial_loglik_parts(cand, X, censor, ev_times, ev_owner)
            # Near the optimum the likelihood gain of a correct Newton step
            # falls below rounding noise, so a score-norm decrease also counts
            # as progress.
            better = new_ll >= loglik or np.linalg.norm(new_score) < np.linalg.norm(score)
            if np.isfinite(new_ll) and better:
                break
            scale *= 0.5
        else:
            raise FitError("visit-rate Newton step halving failed to improve the likelihood")
        gamma, loglik, score, fisher = cand, new_ll, new_score, new_fisher
    info = {"iterations": iters, "score_norm": float(np.linalg.norm(score)), "loglik": float(loglik)}
    return (gamma, info) if full_output else gamma


def breslow_baseline(cohort: Cohort, gamma: np.ndarray) -> StepFunction:
    """Baseline cumulative visit rate: jump (#visits at s) / sum of at-risk weights."""
    X = _visiting_design(cohort)
    censor = np.array([s.censoring_time for s in cohort.subjects])
    w = np.exp(X @ gamma) if X.shape[1] else np.ones(cohort.n)
    ev_times, _ = _pooled_visits(cohort)
    if ev_times.size == 0:
        return StepFunction(np.empty(0), np.empty(0))
    order = np.argsort(-censor, kind="stable")
    cw = np.cumsum(w[order])
    ut, counts = np.unique(ev_times, return_counts=True)
    ridx = np.searchsorted(-censor[order], -ut, side="right") - 1
    if np.any(ridx < 0):
        raise FitError("empty risk set at a visit time")
    return StepFunction(ut, np.cumsum(counts / cw[ridx]))


def frailty_variance(cohort: Cohort, gamma: np.ndarray, baseline: StepFunction):
    """Method-of-moments frailty variance from visit counts.

    Matches E(m^2 - m) = (1 + v) E(nu^2) under a unit-mean multiplicative
    frailty with variance v, then maps to the log-scale parameters
    ``sigma_sq = log(1 + v)`` and ``mu0 = -sigma_sq / 2``.
    """
    X = _visiting_design(cohort)
    lin = X @ gamma if X.shape[1] else np.zeros(cohort.n)
    censor = np.array([s.censoring_time for s in cohort.subjects])
    m = np.array([s.m for s in cohort.subjects], dtype=float)
    nu = np.exp(lin) * baseline(censor)
    den = float(np.sum(nu**2))
    if den <= 0:
        raise FitError("frailty variance is not identified: all fitted visit expectations are zero")
    num = float(np.sum(m**2 - m - nu**2))
    sigma_eta_sq = max(0.0, num / den)
    sigma_sq = float(np.log1p(sigma_eta_sq))
    mu0 = -sigma_sq / 2.0
    return sigma_eta_sq, sigma_sq, mu0, nu


def _eb_mode_update(u, m, nu, sigma, mu0):
    lam = nu * np.exp(np.minimum(mu0 + sigma * u, 700.0))
    grad = sigma * (m - lam) - u
    hess = -(sigma**2) * lam - 1.0
    return grad, hess


def eb_posterior(m: float, nu: float, sigma: float, mu0: float) -> EBPosterior:
    """Laplace approximation to the frailty posterior given a visit count.

    The log-posterior of the standardised frailty is strictly concave with
    curvature at most -1, so damped Newton converges globally.  Returns
    the mode and the negative inverse curvature, which always lies in
    (0, 1].
    """
    if sigma == 0.0:
        return EBPosterior(0.0, 1.0)
    u = 0.0
    grad, hess = _eb_mode_update(u, m, nu, sigma, mu0)
    for _ in range(MAX_ITER):
        step = -grad / hess
        scale = 1.0
        for _ in range(60):
            cand = u + scale * step
            g_new, h_new = _eb_mode_update(cand, m, nu, sigma, mu0)
            if np.isfinite(g_new) and abs(g_new) <= abs(grad):
                break
            scale *= 0.5
        u, grad, hess = cand, g_new, h_new
        if abs(scale * step) < MODE_TOL:
            break
    else:
        raise FitError(f"frailty posterior mode search did not converge (m={m}, nu={nu})")
    lam = nu * np.exp(mu0 + sigma * u)
    s_sq = 1.0 / (sigma**2 * lam + 1.0)
    return EBPosterior(float(u), float(s_sq))


def _eb_posterior_vec(m: np.ndarray, nu: np.ndarray, sigma: float, mu0: float):
    """Vectorised Laplace posteriors for a whole cohort at once."""
    m = np.asarray(m, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if sigma == 0.0:
        return np.zeros_like(m), np.ones_like(m)
    u = np.zeros_like(m)
    grad, hess = _eb_mode_update(u, m, nu, sigma, mu0)
    active = np.abs(grad) > 0
    for _ in range(MAX_ITER):
        step = np.where(active, -grad / hess, 0.0)
        scale = np.ones_like(u)
        for _ in range(60):
            cand = u + scale * step
            g_new, h_new = _eb_mode_update(cand, m, nu, sigma, mu0)
            bad = active & (~np.isfinite(g_new) | (np.abs(g_new) > np.abs(grad)))
            if not np.any(bad):
                break
            scale[bad] *= 0.5
        moved = scale * step
        u = np.where(active, cand, u)
        grad = np.where(active, g_new, grad)
        hess = np.where(active, h_new, hess)
        active = active & (np.abs(moved) >= MODE_TOL)
        if not np.any(active):
            break
    else:
        raise FitError("frailty posterior mode search did not converge for some subjects")
    lam = nu * np.exp(mu0 + sigma * u)
    s_sq = 1.0 / (sigma**2 * lam + 1.0)
    return u, s_sq


def fit_stage1(cohort: Cohort) -> VisitingFit:
    """Run the full visiting stage and package the results."""
    gamma, conv = fit_rate_model(cohort, full_output=True)
    baseline = breslow_baseline(cohort, gamma)
    sigma_eta_sq, sigma_sq, mu0, nu = frailty_variance(cohort, gamma, baseline)
    sigma = float(np.sqrt(sigma_sq))
    m = np.array([s.m for s in cohort.subjects], dtype=float)
    mu_u, s_sq = _eb_posterior_vec(m, nu, sigma, mu0)
    eb = tuple(EBPosterior(float(a), float(b)) for a, b in zip(mu_u, s_sq))
    return VisitingFit(gamma, baseline, sigma_eta_sq, sigma_sq, mu0, nu, eb, conv)
