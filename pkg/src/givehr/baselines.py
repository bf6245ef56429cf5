"""Comparator estimators: summary-statistic regressions, linear mixed
models (plain and with visit/measurement-count adjustments), and inverse
intensity rate ratio weighting.

All of them regress the observed outcomes on an intercept, a linear time
trend, and the fixed outcome covariates; they differ in how (or whether)
they account for the visit and observation processes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .dataset import Cohort, covariate_at, role_values
from .visiting import FitError, fit_rate_model

_STATS = {
    "mean": np.mean,
    "median": np.median,
    "min": np.min,
    "max": np.max,
}


@dataclass(frozen=True)
class BaselineFit:
    method: str
    names: tuple
    coef: np.ndarray
    convergence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "names": list(self.names),
            "coef": self.coef.tolist(),
            "convergence": {k: v for k, v in self.convergence.items() if np.isscalar(v) or isinstance(v, (list, str, bool))},
        }


def _observed_points(cohort: Cohort):
    """Stack observed visits: subject index, time, outcome, fixed covariates."""
    spec = cohort.covariate_spec
    sub, t, y, xs = [], [], [], []
    for i, subj in enumerate(cohort.subjects):
        keep = subj.obs_indicator == 1
        if not np.any(keep):
            continue
        times = subj.visits[keep]
        sub.append(np.full(times.size, i))
        t.append(times)
        y.append(subj.outcome[keep])
        xs.append(role_values(subj, "outcome_fixed", times, spec))
    if not sub:
        raise FitError("no observed outcomes in the cohort")
    return (
        np.concatenate(sub).astype(int),
        np.concatenate(t),
        np.concatenate(y),
        np.vstack(xs),
    )


def _pooled_design(cohort: Cohort):
    sub, t, y, xs = _observed_points(cohort)
    design = np.column_stack([np.ones(t.size), t, xs])
    names = ("(intercept)", "t", *cohort.covariate_spec.columns("outcome_fixed"))
    if cohort.covariate_spec.has_intercept("outcome_fixed"):
        raise FitError("outcome_fixed role must not carry its own intercept for the pooled baselines")
    return sub, t, y, design, names


def summary_regression(cohort: Cohort, stat: str = "mean") -> BaselineFit:
    """OLS of a per-subject summary of observed Y on baseline covariates."""
    if stat not in _STATS:
        raise ValueError(f"unknown summary statistic {stat!r}; expected one of {sorted(_STATS)}")
    fn = _STATS[stat]
    spec = cohort.covariate_spec
    rows, resp = [], []
    dropped = 0
    for subj in cohort.subjects:
        keep = subj.obs_indicator == 1
        if not np.any(keep):
            dropped += 1
            continue
        resp.append(fn(subj.outcome[keep]))
        rows.append(np.concatenate([[1.0], covariate_at(subj, "outcome_fixed", 0.0, spec)]))
    if len(resp) < 2:
        raise FitError("summary regression needs at least 2 subjects with observed outcomes")
    design = np.vstack(rows)
    coef, *_ = np.linalg.lstsq(design, np.asarray(resp), rcond=None)
    names = ("(intercept)", *spec.columns("outcome_fixed"))
    return BaselineFit(f"summary-{stat}", names, coef, {"n_subjects": len(resp), "n_dropped": dropped})


def _count_column(cohort: Cohort, which: str):
    """Running per-subject count at each observed point, current one included.

    ``which`` = "visits" counts all scheduled visits up to t; "observed"
    counts only visits where the outcome was measured.
    """
    cols = []
    for subj in cohort.subjects:
        keep = subj.obs_indicator == 1
        if not np.any(keep):
            continue
        if which == "visits":
            run = np.arange(1, subj.m + 1, dtype=float)
        else:
            run = np.cumsum(subj.obs_indicator).astype(float)
        cols.append(run[keep])
    return np.concatenate(cols)


def _nearly_collinear(design: np.ndarray, col: np.ndarray) -> bool:
    coef, *_ = np.linalg.lstsq(design, col, rcond=None)
    ss_res = float(np.sum((col - design @ coef) ** 2))
    return ss_res <= 1e-10 * max(float(col @ col), 1.0)


def _segments(sub: np.ndarray):
    """Start offsets of each subject's contiguous block in the stacked arrays."""
    change = np.nonzero(np.diff(sub))[0] + 1
    return np.concatenate([[0], change])


class _MarginalLik:
    """Profiled Gaussian marginal likelihood for a random-effects model.

    Parameters are the log-Cholesky entries of the random-effect
    covariance plus log sigma_eps; the fixed effects are profiled out by
    generalized least squares at each evaluation.  When every subject's
    random-effect design rows are identical the subject covariance is
    sigma^2 I + c J and all per-subject algebra collapses to running sums.
    """

    def __init__(self, sub, design, z, y):
        order = np.argsort(sub, kind="stable")
        self.sub = sub[order]
        self.x = design[order]
        self.z = z[order]
        self.y = y[order]
        self.starts = _segments(self.sub)
        self.m = np.diff(np.append(self.starts, self.sub.size)).astype(float)
        self.q = z.shape[1]
        self.n_par = self.q * (self.q + 1) // 2 + 1
        # constant-within-subject random design => compound-symmetry path
        zmax = np.maximum.reduceat(self.z, self.starts, axis=0)
        zmin = np.minimum.reduceat(self.z, self.starts, axis=0)
        self.constant_z = bool(np.all(zmax == zmin))
        if self.constant_z:
            self.z_sub = zmax
            self.sx = np.add.reduceat(self.x, self.starts, axis=0)
            self.sy_sub = np.add.reduceat(self.y, self.starts)
            self.xtx = self.x.T @ self.x
            self.xty = self.x.T @ self.y
            self.yty = float(self.y @ self.y)

    def _unpack(self, par):
        chol = np.zeros((self.q, self.q))
        tril = np.tril_indices(self.q)
        chol[tril] = par[:-1]
        chol[np.diag_indices(self.q)] = np.exp(np.clip(np.diag(chol).copy(), -12.0, 12.0))
        sigma_sq = float(np.exp(np.clip(2.0 * par[-1], -24.0, 24.0)))
        return chol @ chol.T, sigma_sq

    def _collapsed(self, sigma_b, sigma_sq):
        c = np.einsum("ij,jk,ik->i", self.z_sub, sigma_b, self.z_sub)
        g = c / (sigma_sq + self.m * c)
        a_mat = (self.xtx - (self.sx * g[:, None]).T @ self.sx) / sigma_sq
        b_vec = (self.xty - self.sx.T @ (g * self.sy_sub)) / sigma_sq
        yy = (self.yty - float(g @ self.sy_sub**2)) / sigma_sq
        logdet = float(np.sum((self.m - 1.0) * np.log(sigma_sq) + np.log(sigma_sq + self.m * c)))
        return a_mat, b_vec, yy, logdet

    def _per_subject(self, sigma_b, sigma_sq):
        p = self.x.shape[1]
        a_mat = np.zeros((p, p))
        b_vec = np.zeros(p)
        yy = 0.0
        logdet = 0.0
        bounds = np.append(self.starts, self.sub.size)
        for s, e in zip(bounds[:-1], bounds[1:]):
            zi = self.z[s:e]
            vi = zi @ sigma_b @ zi.T + sigma_sq * np.eye(e - s)
            chol = np.linalg.cholesky(vi)
            logdet += 2.0 * float(np.sum(np.log(np.diag(chol))))
            xi = np.linalg.solve(chol, self.x[s:e])
            yi = np.linalg.solve(chol, self.y[s:e])
            a_mat += xi.T @ xi
            b_vec += xi.T @ yi
            yy += float(yi @ yi)
        return a_mat, b_vec, yy, logdet

    def profile(self, par):
        """Returns (-2 loglik at profiled beta, beta)."""
        sigma_b, sigma_sq = self._unpack(par)
        if self.constant_z:
            a_mat, b_vec, yy, logdet = self._collapsed(sigma_b, sigma_sq)
        else:
            a_mat, b_vec, yy, logdet = self._per_subject(sigma_b, sigma_sq)
        try:
            beta = np.linalg.solve(a_mat, b_vec)
        except np.linalg.LinAlgError:
            return np.inf, np.full(b_vec.size, np.nan)
        quad = yy - float(beta @ b_vec)
        neg2 = logdet + quad + self.sub.size * np.log(2.0 * np.pi)
        return neg2, beta

    def __call__(self, par):
        return self.profile(par)[0]


def fit_lmm(cohort: Cohort, variant: str = "standard") -> BaselineFit:
    """Maximum-likelihood linear mixed model on the observed points.

    Fixed part: intercept, linear time, and the fixed outcome covariates;
    random part: the outcome_random role (default intercept + F).  The
    ``visit_aware`` and ``obs_aware`` variants append the running count of
    scheduled visits or of actual measurements as an extra fixed covariate;
    a count column that is collinear with the rest of the design is
    dropped with a warning.
    """
    if variant not in ("standard", "visit_aware", "obs_aware"):
        raise ValueError(f"unknown LMM variant {variant!r}")
    sub, t, y, design, names = _pooled_design(cohort)
    spec = cohort.covariate_spec
    dropped_count_col = False
    if variant != "standard":
        col = _count_column(cohort, "visits" if variant == "visit_aware" else "observed")
        cname = "visit_count" if variant == "visit_aware" else "measurement_count"
        if _nearly_collinear(design, col):
            warnings.warn(f"{cname} is collinear with the design; dropping it from the {variant} LMM")
            dropped_count_col = True
        else:
            design = np.column_stack([design, col])
            names = (*names, cname)

    z_rows = []
    for i, subj in enumerate(cohort.subjects):
        keep = subj.obs_indicator == 1
        if np.any(keep):
            z_rows.append(role_values(subj, "outcome_random", subj.visits[keep], spec))
    z = np.vstack(z_rows)

    lik = _MarginalLik(sub, design, z, y)
    # start from the pooled OLS residual scale, split between the two pieces
    ols, *_ = np.linalg.lstsq(lik.x, lik.y, rcond=None)
    resid_var = float(np.var(lik.y - lik.x @ ols)) or 1.0
    par0 = np.zeros(lik.n_par)
    tril = np.tril_indices(lik.q)
    diag_pos = np.nonzero(tril[0] == tril[1])[0]
    par0[diag_pos] = 0.5 * np.log(resid_var / 2.0)
    par0[-1] = 0.5 * np.log(resid_var / 2.0)

    res = optimize.minimize(lik, par0, method="L-BFGS-B", options={"maxiter": 500, "ftol": 1e-12})
    if not res.success:
        # finite-difference line searches can fail when a variance sits on
        # its boundary; refine derivative-free from the best point found
        res = optimize.minimize(lik, res.x, method="Nelder-Mead", options={"maxiter": 4000, "xatol": 1e-9, "fatol": 1e-10})
    if not res.success:
        raise FitError(f"mixed-model likelihood did not converge: {res.message}")
    neg2, beta = lik.profile(res.x)
    if not np.all(np.isfinite(beta)):
        raise FitError("mixed-model fixed effects are not finite")
    sigma_b, sigma_sq = lik._unpack(res.x)
    method = {"standard": "lmm", "visit_aware": "va-lmm", "obs_aware": "oa-lmm"}[variant]
    conv = {
        "neg2_loglik": float(neg2),
        "iterations": int(res.nit),
        "sigma_b": sigma_b.tolist(),
        "sigma_eps": float(np.sqrt(sigma_sq)),
        "collapsed_covariance": lik.constant_z,
        "dropped_count_column": dropped_count_col,
    }
    return BaselineFit(method, names, beta, conv)


def iirr_weighted(cohort: Cohort) -> BaselineFit:
    """Visit-intensity-weighted pooled regression.

    Reuses the visiting-stage coefficient estimate; each observed point is
    weighted by the inverse of its subject's relative visit intensity
    exp(gamma' X).  With homogeneous covariates this reduces to pooled OLS.
    """
    gamma = fit_rate_model(cohort)
    sub, t, y, design, names = _pooled_design(cohort)
    spec = cohort.covariate_spec
    x_v = np.array([covariate_at(s, "visiting", 0.0, spec) for s in cohort.subjects])
    w_subject = np.exp(-(x_v @ gamma)) if gamma.size else np.ones(cohort.n)
    w = w_subject[sub]
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    return BaselineFit("iirr", names, coef, {"gamma": gamma.tolist()})


def _adapt_baseline(fit: BaselineFit, se_method):
    return list(fit.names), fit.coef, None


def _run_givehr(cohort: Cohort, se_method):
    from .inference import bootstrap_variance, sandwich_variance
    from .outcome import fit_givehr

    fit = fit_givehr(cohort)
    se = None
    if se_method == "sandwich":
        se = sandwich_variance(fit, cohort).se
    elif se_method == "bootstrap":
        se = bootstrap_variance(cohort).se
    return list(fit.coef_names), fit.outcome.psi, se


ESTIMATORS = {
    "summary-mean": lambda cohort, se=None: _adapt_baseline(summary_regression(cohort, "mean"), se),
    "summary-median": lambda cohort, se=None: _adapt_baseline(summary_regression(cohort, "median"), se),
    "summary-min": lambda cohort, se=None: _adapt_baseline(summary_regression(cohort, "min"), se),
    "summary-max": lambda cohort, se=None: _adapt_baseline(summary_regression(cohort, "max"), se),
    "lmm": lambda cohort, se=None: _adapt_baseline(fit_lmm(cohort, "standard"), se),
    "va-lmm": lambda cohort, se=None: _adapt_baseline(fit_lmm(cohort, "visit_aware"), se),
    "oa-lmm": lambda cohort, se=None: _adapt_baseline(fit_lmm(cohort, "obs_aware"), se),
    "iirr": lambda cohort, se=None: _adapt_baseline(iirr_weighted(cohort), se),
    "givehr": _run_givehr,
}
