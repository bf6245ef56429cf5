"""Stage 3: outcome regression at observed visits with risk-set centering.

The outcome design at time t couples the fixed covariates with
"compensation" columns kappa(t) * Z, where kappa is the success-weighted
posterior mean of the log frailty from stage 2.  Covariate vectors are
centered at each visit time by a weighted average over every subject
still under follow-up, with weights proportional to the marginal
observation probability times the subject's visit-count multiplier.  The
centered estimating equation is linear in the coefficients and solved in
closed form; baseline increments then follow from the residuals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import Cohort, role_values
from .observation import ObservationParams, _point_terms, fit_observation, point_weights_terms
from .visiting import FitError, StepFunction, VisitingFit, _eb_posterior_vec, fit_stage1

COND_LIMIT = 1e12
ZERO_COL_TOL = 1e-12


@dataclass(frozen=True)
class OutcomeParams:
    """Coefficients on the fixed outcome covariates (`beta`) and on the
    compensation columns (`theta`); NaN marks a dropped column."""

    beta: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)) if np.size(self.theta) else np.empty(0))

    @property
    def psi(self) -> np.ndarray:
        return np.concatenate([self.beta, self.theta])

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "theta": self.theta.tolist()}


@dataclass(frozen=True)
class VisitPoint:
    """One scheduled visit: its owner, time, centering weight, stacked
    design vector, observation indicator, and outcome (NaN if unobserved)."""

    subject: int
    time: float
    weight: float
    v: np.ndarray
    r: int
    y: float


@dataclass(frozen=True)
class RiskSetCenters:
    """Weighted covariate averages over the at-risk set at each visit time."""

    times: np.ndarray
    vbar: np.ndarray
    total_weight: np.ndarray

    def index(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, t)
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(idx >= self.times.size) or np.any(self.times[np.minimum(idx, self.times.size - 1)] != t_arr):
            raise KeyError("time not present in the risk-set grid")
        return idx


@dataclass(frozen=True)
class _Profile:
    """Piecewise-constant trajectory of one subject's design and weight."""

    starts: np.ndarray
    v: np.ndarray
    w: np.ndarray
    censor: float


@dataclass(frozen=True)
class GivehrFit:
    visiting: VisitingFit
    observation: object
    outcome: OutcomeParams
    baseline: StepFunction
    beta_names: tuple
    theta_names: tuple
    diagnostics: dict = field(default_factory=dict)

    @property
    def coef_names(self) -> tuple:
        return self.beta_names + self.theta_names

    @property
    def coefficients(self) -> np.ndarray:
        return self.outcome.psi

    def to_dict(self) -> dict:
        return {
            "visiting": self.visiting.to_dict(),
            "observation": self.observation.to_dict(),
            "outcome": self.outcome.to_dict(),
            "baseline_knots": self.baseline.knots.tolist(),
            "baseline_cum": self.baseline.cumvalues.tolist(),
            "beta_names": list(self.beta_names),
            "theta_names": list(self.theta_names),
            "diagnostics": {k: v for k, v in self.diagnostics.items() if not isinstance(v, np.ndarray)},
        }


def _role_names(spec, role, prefix=None):
    names = []
    if spec.has_intercept(role):
        names.append("(intercept)")
    names.extend(spec.columns(role))
    if prefix:
        names = [f"{prefix}" if n == "(intercept)" else f"{prefix}:{n}" for n in names]
    return tuple(names)


def _weight_scales(cohort: Cohort, visiting: VisitingFit) -> np.ndarray:
    """Per-subject multiplier m_i / Lambda0(C_i) for the centering weights."""
    m = np.array([s.m for s in cohort.subjects], dtype=float)
    lam = visiting.baseline(np.array([s.censoring_time for s in cohort.subjects]))
    scale = np.zeros(cohort.n)
    pos = lam > 0
    scale[pos] = m[pos] / lam[pos]
    dead = (~pos) & (m == 0)
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} subject(s) have zero fitted visit expectation and zero visits; "
            "they carry no weight in the risk-set averages"
        )
    return scale


def _segment_starts(subject, censor, spec):
    knots = [np.array([0.0])]
    for role in ("outcome_fixed", "outcome_random", "obs_fixed", "obs_random"):
        for col in spec.columns(role):
            series = subject.covariates[col]
            if series.knots is not None:
                k = series.knots
                knots.append(k[(k > 0) & (k <= censor)])
    return np.unique(np.concatenate(knots))


def _profiles(cohort: Cohort, visiting: VisitingFit, params: ObservationParams):
    spec = cohort.covariate_spec
    scales = _weight_scales(cohort, visiting)
    out = []
    for i, subj in enumerate(cohort.subjects):
        starts = _segment_starts(subj, subj.censoring_time, spec)
        x_y = role_values(subj, "outcome_fixed", starts, spec)
        z_y = role_values(subj, "outcome_random", starts, spec)
        x_o = role_values(subj, "obs_fixed", starts, spec)
        z_o = role_values(subj, "obs_random", starts, spec)
        eb = visiting.eb[i]
        _, om, kap = _point_terms(x_o, z_o, params, eb.mu_u, eb.s_u_sq)
        v = np.hstack([x_y, kap[:, None] * z_y])
        out.append(_Profile(starts, v, om * scales[i], subj.censoring_time))
    return out


def _pooled_times(cohort: Cohort) -> np.ndarray:
    if cohort.n == 0:
        return np.empty(0)
    allt = np.concatenate([s.visits for s in cohort.subjects])
    return np.unique(allt)


def _segment_bounds(profile: _Profile, times: np.ndarray):
    """Index ranges [s, e) into ``times`` covered by each constancy segment."""
    s_idx = np.searchsorted(times, profile.starts, side="left")
    last = np.searchsorted(times, profile.censor, side="right")
    e_idx = np.append(s_idx[1:], last)
    return s_idx, np.minimum(e_idx, last)


def risk_set_centers(cohort: Cohort, visiting: VisitingFit, params: ObservationParams, times=None, profiles=None) -> RiskSetCenters:
    """Weighted design averages over subjects still under follow-up.

    At each time the average runs over every subject with t <= C_i, not
    just those visiting, using that subject's current covariate values and
    marginal observation probability.
    """
    if times is None:
        times = _pooled_times(cohort)
    times = np.asarray(times, dtype=float)
    if profiles is None:
        profiles = _profiles(cohort, visiting, params)
    dim = profiles[0].v.shape[1] if profiles else 0
    d_w = np.zeros(times.size + 1)
    d_wv = np.zeros((times.size + 1, dim))
    for prof in profiles:
        s_idx, e_idx = _segment_bounds(prof, times)
        np.add.at(d_w, s_idx, prof.w)
        np.add.at(d_w, e_idx, -prof.w)
        np.add.at(d_wv, s_idx, prof.w[:, None] * prof.v)
        np.add.at(d_wv, e_idx, -(prof.w[:, None] * prof.v))
    s_w = np.cumsum(d_w)[: times.size]
    s_wv = np.cumsum(d_wv, axis=0)[: times.size]
    if times.size and s_w.min() <= 0:
        bad = times[int(np.argmin(s_w))]
        raise FitError(f"no at-risk weight at visit time {bad}; risk-set average undefined")
    vbar = s_wv / s_w[:, None]
    return RiskSetCenters(times, vbar, s_w)


def build_visit_points(cohort: Cohort, visiting: VisitingFit, params: ObservationParams) -> list:
    """Assemble one :class:`VisitPoint` per scheduled visit."""
    spec = cohort.covariate_spec
    scales = _weight_scales(cohort, visiting)
    omegas, kappas = point_weights_terms(cohort, visiting, params, [s.visits for s in cohort.subjects])
    points = []
    for i, subj in enumerate(cohort.subjects):
        if subj.m == 0:
            continue
        x_y = role_values(subj, "outcome_fixed", subj.visits, spec)
        z_y = role_values(subj, "outcome_random", subj.visits, spec)
        v = np.hstack([x_y, kappas[i][:, None] * z_y])
        w = omegas[i] * scales[i]
        for j, t in enumerate(subj.visits):
            points.append(VisitPoint(i, float(t), float(w[j]), v[j], int(subj.obs_indicator[j]), float(subj.outcome[j])))
    return points


def solve_wls(points, centers: RiskSetCenters, n_beta: int):
    """Closed-form solve of the centered estimating equation.

    Compensation columns that are numerically zero across all observed
    points are dropped and reported as NaN coefficients.
    Returns ``(psi, s_matrix, cond, residual_norm, kept_mask)``.
    """
    obs = [pt for pt in points if pt.r == 1]
    if not obs:
        raise FitError("no observed outcomes; cannot solve the outcome stage")
    v_mat = np.array([pt.v for pt in obs])
    y = np.array([pt.y for pt in obs])
    idx = centers.index(np.array([pt.time for pt in obs]))
    h_mat = v_mat - centers.vbar[idx]

    dim = v_mat.shape[1]
    col_scale = np.max(np.abs(v_mat), axis=0)
    kept = np.ones(dim, dtype=bool)
    kept[n_beta:] = col_scale[n_beta:] > ZERO_COL_TOL

    s_mat = h_mat[:, kept].T @ v_mat[:, kept]
    t_vec = h_mat[:, kept].T @ y
    cond = float(np.linalg.cond(s_mat))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        _, _, vt = np.linalg.svd(s_mat)
        raise FitError(
            f"outcome design is numerically singular (cond={cond:.3g}); "
            f"flat direction {np.round(vt[-1], 4).tolist()}"
        )
    psi_kept = np.linalg.solve(s_mat, t_vec)
    psi_kept += np.linalg.solve(s_mat, t_vec - s_mat @ psi_kept)  # one refinement pass
    resid = float(np.linalg.norm(t_vec - s_mat @ psi_kept, ord=np.inf))
    psi = np.full(dim, np.nan)
    psi[kept] = psi_kept
    s_full = np.full((dim, dim), np.nan)
    s_full[np.ix_(kept, kept)] = s_mat
    return psi, s_full, cond, resid, kept


def baseline_increments(points, psi: np.ndarray, centers: RiskSetCenters) -> StepFunction:
    """Residual-based jumps of the baseline outcome process at each visit time."""
    psi0 = np.where(np.isnan(psi), 0.0, psi)
    jumps = np.zeros(centers.times.size)
    for pt in points:
        if pt.r == 1:
            j = int(centers.index(pt.time))
            jumps[j] += pt.y - psi0 @ pt.v
    jumps /= centers.total_weight
    return StepFunction(centers.times, np.cumsum(jumps))


def _centering_residual(profiles, centers: RiskSetCenters, n_check: int = 48) -> float:
    """Independent spot check of the weighted-centering identity.

    Recomputes sum_i w_i(t) (V_i(t) - Vbar(t)) at a spread of visit times
    by direct summation over subjects and returns the largest normalised
    component.
    """
    t_size = centers.times.size
    if t_size == 0:
        return 0.0
    take = np.unique(np.linspace(0, t_size - 1, num=min(n_check, t_size)).astype(int))
    worst = 0.0
    for j in take:
        t = centers.times[j]
        acc = np.zeros(centers.vbar.shape[1])
        scale = 1.0
        for prof in profiles:
            if t > prof.censor:
                continue
            seg = int(np.searchsorted(prof.starts, t, side="right")) - 1
            acc += prof.w[seg] * (prof.v[seg] - centers.vbar[j])
            scale += prof.w[seg] * float(np.max(np.abs(prof.v[seg]), initial=1.0))
        worst = max(worst, float(np.max(np.abs(acc))) / scale)
    return worst


def fit_givehr(cohort: Cohort, config=None) -> GivehrFit:
    """Run all three stages and return the assembled fit.

    ``config`` may carry ``centering_check_points`` (spot-check grid size,
    default 48) and ``init_observation`` (an :class:`ObservationParams`
    to start stage 2 from).
    """
    config = dict(config or {})
    spec = cohort.covariate_spec
    visiting = fit_stage1(cohort)
    obs_fit = fit_observation(cohort, visiting.eb, init=config.get("init_observation"))
    params = obs_fit.params

    profiles = _profiles(cohort, visiting, params)
    centers = risk_set_centers(cohort, visiting, params, profiles=profiles)
    points = build_visit_points(cohort, visiting, params)
    n_beta = spec.dim("outcome_fixed")
    psi, s_mat, cond, resid, kept = solve_wls(points, centers, n_beta)
    baseline = baseline_increments(points, psi, centers)

    beta_names = _role_names(spec, "outcome_fixed")
    theta_names = _role_names(spec, "outcome_random", prefix="kappa")
    dropped = [name for name, k in zip(beta_names + theta_names, kept) if not k]
    if dropped:
        warnings.warn(f"compensation column(s) {dropped} are numerically zero; coefficients set to NaN")
    center_res = _centering_residual(profiles, centers, int(config.get("centering_check_points", 48)))

    outcome = OutcomeParams(psi[:n_beta], psi[n_beta:])
    diag = {
        "cond": cond,
        "estimating_equation_residual": resid,
        "centering_residual": center_res,
        "n_points": len(points),
        "n_observed": int(sum(pt.r for pt in points)),
        "dropped_columns": dropped,
        "kept_mask": kept.tolist(),
    }
    return GivehrFit(visiting, obs_fit, outcome, baseline, beta_names, theta_names, diag)


def per_subject_contributions(cohort: Cohort, fit: GivehrFit):
    """Per-subject estimating-function contributions and the unscaled slope
    matrix, for sandwich covariance assembly.

    Each subject's contribution is its own centered-residual sum over
    observed visits; the contributions add up to the (solved, hence zero)
    estimating equation.
    """
    params = fit.observation.params
    centers = risk_set_centers(cohort, fit.visiting, params)
    points = build_visit_points(cohort, fit.visiting, params)
    kept = np.asarray(fit.diagnostics.get("kept_mask", [True] * fit.outcome.psi.size), dtype=bool)
    psi = fit.outcome.psi[kept]

    n = cohort.n
    dim = int(kept.sum())
    phi = np.zeros((n, dim))
    s_raw = np.zeros((dim, dim))
    for pt in points:
        if pt.r != 1:
            continue
        j = int(centers.index(pt.time))
        v = pt.v[kept]
        h = v - centers.vbar[j, kept]
        phi[pt.subject] += h * (pt.y - psi @ v)
        s_raw += np.outer(h, v)
    return phi, s_raw, kept


def compensated_process_totals(
    cohort: Cohort,
    gamma: np.ndarray,
    cum_rate,
    sigma_sq: float,
    mu0: float,
    obs_params: ObservationParams,
    outcome_params: OutcomeParams,
    cum_outcome_baseline,
) -> np.ndarray:
    """Oracle-mode compensated visit-outcome process at supplied parameters.

    For each subject with baseline-constant covariates, returns the sum of
    observed centered-by-model residuals minus the weight-scaled baseline
    compensator evaluated at the censoring time.  ``cum_rate`` and
    ``cum_outcome_baseline`` are callables for the cumulative baseline
    visit rate and the cumulative baseline outcome drift.  The mean over
    subjects should vanish when the supplied parameters generated the data.
    """
    spec = cohort.covariate_spec
    for subj in cohort.subjects:
        for col in spec.all_columns():
            if not subj.covariates[col].is_constant:
                raise FitError("oracle compensated process requires baseline-constant covariates")

    n = cohort.n
    censor = np.array([s.censoring_time for s in cohort.subjects])
    m = np.array([s.m for s in cohort.subjects], dtype=float)
    x_v = np.array([role_values(s, "visiting", np.array([0.0]), spec)[0] for s in cohort.subjects])
    x_o = np.array([role_values(s, "obs_fixed", np.array([0.0]), spec)[0] for s in cohort.subjects])
    z_o = np.array([role_values(s, "obs_random", np.array([0.0]), spec)[0] for s in cohort.subjects])
    x_y = np.array([role_values(s, "outcome_fixed", np.array([0.0]), spec)[0] for s in cohort.subjects])
    z_y = np.array([role_values(s, "outcome_random", np.array([0.0]), spec)[0] for s in cohort.subjects])

    lam0_c = np.asarray([cum_rate(c) for c in censor], dtype=float)
    nu = np.exp(x_v @ gamma) * lam0_c
    mu_u, s_sq = _eb_posterior_vec(m, nu, float(np.sqrt(sigma_sq)), mu0)
    _, omega, kappa = _point_terms(x_o, z_o, obs_params, mu_u, s_sq)

    psi = outcome_params.psi
    v = np.hstack([x_y, kappa[:, None] * z_y])
    fitted = v @ psi
    resid_sum = np.zeros(n)
    for i, subj in enumerate(cohort.subjects):
        r = subj.obs_indicator == 1
        if np.any(r):
            resid_sum[i] = float(np.sum(subj.outcome[r] - fitted[i]))
    scale = np.zeros(n)
    pos = lam0_c > 0
    scale[pos] = m[pos] / lam0_c[pos]
    a0_c = np.asarray([cum_outcome_baseline(c) for c in censor], dtype=float)
    return resid_sum - scale * omega * a0_c
