"""Standard errors for the three-stage estimator.

Two routes: a plug-in sandwich built from per-subject estimating-function
contributions (treating the first two stages as fixed), and a
subject-level nonparametric bootstrap that refits everything per
resample and therefore propagates all stages' variability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .dataset import Cohort, SubjectData
from .outcome import GivehrFit, fit_givehr, per_subject_contributions
from .visiting import FitError


@dataclass(frozen=True)
class VarianceEstimate:
    method: str
    cov: np.ndarray
    se: np.ndarray
    names: tuple
    details: dict = field(default_factory=dict)

    def ci(self, level: float = 0.95):
        """Normal-theory confidence intervals, one row per coefficient."""
        z = norm.ppf(0.5 + level / 2.0)
        est = self.details.get("estimates")
        if est is None:
            raise ValueError("point estimates not attached to this variance estimate")
        est = np.asarray(est, dtype=float)
        return np.column_stack([est - z * self.se, est + z * self.se])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "se": self.se.tolist(),
            "names": list(self.names),
            "details": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.details.items()},
        }


def sandwich_variance(fit: GivehrFit, cohort: Cohort) -> VarianceEstimate:
    """Plug-in sandwich covariance for the outcome-stage coefficients.

    Meat: outer products of per-subject contributions (observed centered
    residual sums minus the baseline compensator integral).  Bread: the
    unscaled slope matrix of the estimating equation.  Uncertainty from
    the visiting and observation stages is not propagated.
    """
    phi, s_raw, kept = per_subject_contributions(cohort, fit)
    meat = phi.T @ phi
    bread_inv = np.linalg.solve(s_raw, np.eye(s_raw.shape[0]))
    cov_kept = bread_inv @ meat @ bread_inv.T
    cov_kept = (cov_kept + cov_kept.T) / 2.0

    dim = kept.size
    cov = np.full((dim, dim), np.nan)
    cov[np.ix_(kept, kept)] = cov_kept
    se = np.full(dim, np.nan)
    se[kept] = np.sqrt(np.maximum(np.diag(cov_kept), 0.0))
    details = {
        "contribution_sum": np.abs(phi.sum(axis=0)).max(),
        "estimates": fit.outcome.psi,
        "n_subjects": cohort.n,
    }
    return VarianceEstimate("sandwich", cov, se, fit.coef_names, details)


def _resample(cohort: Cohort, rng: np.random.Generator) -> Cohort:
    idx = rng.integers(0, cohort.n, size=cohort.n)
    subjects = []
    counts: dict[int, int] = {}
    for i in idx:
        k = counts.get(int(i), 0)
        counts[int(i)] = k + 1
        src = cohort.subjects[int(i)]
        sid = src.id if k == 0 else f"{src.id}#{k}"
        subjects.append(SubjectData(sid, src.censoring_time, src.visits, src.obs_indicator, src.outcome, src.covariates))
    return Cohort(tuple(subjects), cohort.covariate_spec, cohort.max_followup)


def bootstrap_variance(
    cohort: Cohort,
    config=None,
    n_boot: int = 200,
    seed: int = 0,
    max_failure_fraction: float = 0.1,
) -> VarianceEstimate:
    """Subject-resampling bootstrap of the full three-stage pipeline.

    Each replicate draws subjects with replacement (duplicates renamed to
    keep ids unique), refits, and records the coefficients.  Replicates
    whose fit fails are dropped; more than ``max_failure_fraction``
    failures aborts.  Deterministic in ``seed`` and independent of subject
    labels.
    """
    if n_boot < 2:
        raise ValueError("bootstrap needs at least 2 replicates")
    base = fit_givehr(cohort, config)
    draws = []
    failures = 0
    for b in range(n_boot):
        rng = np.random.default_rng(np.random.SeedSequence((seed, b)))
        try:
            fit_b = fit_givehr(_resample(cohort, rng), config)
            draws.append(fit_b.outcome.psi)
        except (FitError, np.linalg.LinAlgError):
            failures += 1
    if failures > max_failure_fraction * n_boot:
        raise FitError(f"bootstrap aborted: {failures}/{n_boot} replicates failed to fit")
    draws_arr = np.array(draws)
    cov = np.full((draws_arr.shape[1],) * 2, np.nan)
    se = np.full(draws_arr.shape[1], np.nan)
    ok_cols = ~np.any(np.isnan(draws_arr), axis=0)
    sub = draws_arr[:, ok_cols]
    cov_ok = np.cov(sub, rowvar=False, ddof=1)
    cov[np.ix_(ok_cols, ok_cols)] = cov_ok
    se[ok_cols] = np.sqrt(np.diag(np.atleast_2d(cov_ok)))
    details = {
        "n_boot": n_boot,
        "failures": failures,
        "estimates": base.outcome.psi,
        "seed": seed,
    }
    return VarianceEstimate("bootstrap", cov, se, base.coef_names, details)
