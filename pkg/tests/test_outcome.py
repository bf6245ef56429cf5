import numpy as np
import pytest

from givehr.dataset import Cohort, CovariateSeries, CovariateSpec, SubjectData
from givehr.observation import ObservationParams, kappa_value, marginal_obs_prob
from givehr.outcome import (
    FitError,
    baseline_increments,
    build_visit_points,
    fit_givehr,
    risk_set_centers,
    solve_wls,
)
from givehr.simulate import ScenarioSpec, generate, poisson_process_times
from givehr.visiting import EBPosterior, StepFunction, VisitingFit, fit_stage1

NO_LATENT = ObservationParams(np.array([0.0]), np.zeros(0), np.zeros((0, 0)))


def plain_spec(outcome_fixed=("x",), outcome_random=(), intercepts=("obs_fixed",)):
    return CovariateSpec(
        visiting=(),
        obs_fixed=(),
        obs_random=(),
        outcome_fixed=outcome_fixed,
        outcome_random=outcome_random,
        intercepts=frozenset(intercepts),
    )


def handmade_visiting(cohort, baseline, eb=None):
    n = cohort.n
    eb = tuple(eb) if eb is not None else tuple(EBPosterior(0.0, 1.0) for _ in range(n))
    return VisitingFit(
        gamma=np.zeros(0),
        baseline=baseline,
        sigma_eta_sq=0.0,
        sigma_sq=0.0,
        mu0=0.0,
        nu=np.ones(n),
        eb=eb,
        convergence={},
    )


def subject(sid, censor, visits, r=None, y=None, **cov):
    visits = np.asarray(visits, dtype=float)
    r = np.zeros(visits.size, dtype=int) if r is None else np.asarray(r, dtype=int)
    y = np.where(r == 1, 0.0, np.nan) if y is None else np.asarray(y, dtype=float)
    series = {k: CovariateSeries(values=[float(v)]) for k, v in cov.items()}
    return SubjectData(sid, censor, visits, r, y, series)


# ------------------------------------------------------------- visit points


def test_point_weight_arithmetic():
    cohort = Cohort((subject("a", 10.0, [1.0, 2.0, 3.0, 4.0], x=0.3),), plain_spec(), 10.0)
    baseline = StepFunction(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    points = build_visit_points(cohort, handmade_visiting(cohort, baseline), NO_LATENT)
    assert len(points) == 4
    assert all(pt.weight == pytest.approx(0.5 * 4 / 2.0) for pt in points)


def test_compensation_column_is_posterior_mean_when_delta_zero():
    spec = plain_spec(outcome_random=(), intercepts=("obs_fixed", "obs_random", "outcome_random"))
    cohort = Cohort((subject("a", 10.0, [2.0], x=1.5),), spec, 10.0)
    baseline = StepFunction(np.array([2.0]), np.array([1.0]))
    visiting = handmade_visiting(cohort, baseline, eb=[EBPosterior(0.7, 0.4)])
    params = ObservationParams(np.array([0.0]), np.array([0.0]), np.zeros((1, 1)))
    (pt,) = build_visit_points(cohort, visiting, params)
    np.testing.assert_allclose(pt.v, [1.5, 0.7])


def figure_cohort():
    spec = plain_spec(outcome_fixed=("age",))
    rows = [
        ("p1", 24.0, [3.0, 9.0, 14.0, 20.0], [0, 1, 0, 0], 61.0),
        ("p2", 24.0, [5.0, 11.0, 17.0], [0, 1, 1], 48.0),
        ("p3", 24.0, [8.0], [1], 55.0),
    ]
    subjects = []
    for sid, censor, visits, r, age in rows:
        r = np.asarray(r)
        y = np.where(r == 1, 100.0 + age / 10.0, np.nan)
        subjects.append(subject(sid, censor, visits, r, y, age=age))
    return Cohort(tuple(subjects), spec, 24.0)


def test_figure_cohort_yields_eight_points_four_observed():
    cohort = figure_cohort()
    visiting = fit_stage1(cohort)
    points = build_visit_points(cohort, visiting, NO_LATENT)
    assert len(points) == 8
    assert sum(pt.r for pt in points) == 4
    assert all(pt.weight > 0.0 for pt in points)


# --------------------------------------------------------- risk-set centers


def test_identical_subjects_center_to_zero():
    subjects = tuple(subject(f"s{i}", 10.0, [1.0, 4.0], x=2.0) for i in range(3))
    cohort = Cohort(subjects, plain_spec(), 10.0)
    visiting = handmade_visiting(cohort, StepFunction(np.array([1.0]), np.array([1.0])))
    centers = risk_set_centers(cohort, visiting, NO_LATENT)
    for pt in build_visit_points(cohort, visiting, NO_LATENT):
        h = pt.v - centers.vbar[int(centers.index(pt.time))]
        np.testing.assert_allclose(h, 0.0, atol=1e-15)


def test_weighted_average_with_unequal_weights():
    subjects = (
        subject("a", 10.0, [2.0, 3.0], x=0.0),
        subject("b", 10.0, [2.0, 3.0, 4.0, 5.0, 6.0, 7.0], x=4.0),
    )
    cohort = Cohort(subjects, plain_spec(), 10.0)
    visiting = handmade_visiting(cohort, StepFunction(np.array([1.0]), np.array([1.0])))
    centers = risk_set_centers(cohort, visiting, NO_LATENT)
    assert centers.vbar[int(centers.index(2.0)), 0] == pytest.approx(3.0)
    assert centers.total_weight[int(centers.index(2.0))] == pytest.approx(1.0 + 3.0)


def test_zero_visit_zero_expectation_subject_warns():
    subjects = (subject("a", 10.0, [5.0, 6.0], x=1.0), subject("b", 1.0, [], x=2.0))
    cohort = Cohort(subjects, plain_spec(), 10.0)
    visiting = handmade_visiting(cohort, StepFunction(np.array([5.0]), np.array([1.0])))
    with pytest.warns(UserWarning, match="carry no weight"):
        risk_set_centers(cohort, visiting, NO_LATENT)


def test_centering_identity_recomputed_from_scratch():
    cohort, _ = generate(ScenarioSpec("A2", n=200, seed=80))
    fit = fit_givehr(cohort)
    assert fit.diagnostics["centering_residual"] < 1e-10
    assert fit.diagnostics["estimating_equation_residual"] < 1e-8

    params = fit.observation.params
    centers = risk_set_centers(cohort, fit.visiting, params)
    censor = np.array([s.censoring_time for s in cohort.subjects])
    scale = np.array([s.m for s in cohort.subjects]) / fit.visiting.baseline(censor)
    rows = []
    for i, s in enumerate(cohort.subjects):
        x_o = np.array([1.0, s.covariates["F"].at(0.0), s.covariates["X"].at(0.0)])
        z_o = np.array([1.0, s.covariates["F"].at(0.0)])
        omega = marginal_obs_prob(x_o, z_o, fit.visiting.eb[i], params)
        kappa = kappa_value(x_o, z_o, fit.visiting.eb[i], params)
        x_y = np.array([s.covariates["F"].at(0.0), s.covariates["X"].at(0.0)])
        z_y = np.array([1.0, s.covariates["F"].at(0.0)])
        rows.append((omega * scale[i], np.concatenate([x_y, kappa * z_y])))
    weights = np.array([w for w, _ in rows])
    design = np.array([v for _, v in rows])
    worst = 0.0
    for j, t in enumerate(centers.times):
        at_risk = censor >= t
        p = weights * at_risk
        resid = p @ design - centers.vbar[j] * p.sum()
        worst = max(worst, np.max(np.abs(resid)) / p.sum())
    assert worst < 1e-10


# -------------------------------------------------------------- linear step


def equal_weight_points(seed, y_fn, n=50):
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0.5, 9.5, size=n))
    subjects = []
    for i, t in enumerate(times):
        x1, x2 = rng.standard_normal(2)
        y = y_fn(x1, x2, rng)
        subjects.append(
            SubjectData(
                f"s{i}", 10.0, [t], [1], [y],
                {"x1": CovariateSeries(values=[x1]), "x2": CovariateSeries(values=[x2])},
            )
        )
    cohort = Cohort(tuple(subjects), plain_spec(outcome_fixed=("x1", "x2")), 10.0)
    visiting = handmade_visiting(cohort, StepFunction(np.array([10.0]), np.array([1.0])))
    points = build_visit_points(cohort, visiting, NO_LATENT)
    centers = risk_set_centers(cohort, visiting, NO_LATENT)
    return points, centers


def test_wls_matches_dense_least_squares_without_compensation():
    points, centers = equal_weight_points(81, lambda x1, x2, rng: 1.0 + 0.5 * x1 - 0.3 * x2 + rng.normal())
    psi, _, _, resid, kept = solve_wls(points, centers, n_beta=2)
    assert kept.all() and resid < 1e-8
    h = np.array([pt.v - centers.vbar[int(centers.index(pt.time))] for pt in points])
    y = np.array([pt.y for pt in points])
    ols = np.linalg.lstsq(h, y, rcond=None)[0]
    np.testing.assert_allclose(psi, ols, atol=1e-10)


def test_constant_outcome_gives_zero_coefficients():
    points, centers = equal_weight_points(82, lambda x1, x2, rng: 3.0)
    psi, _, _, _, _ = solve_wls(points, centers, n_beta=2)
    np.testing.assert_allclose(psi, 0.0, atol=1e-10)


def test_exact_linear_outcome_leaves_zero_baseline():
    points, centers = equal_weight_points(83, lambda x1, x2, rng: 0.5 * x1 - 0.3 * x2)
    psi, _, _, _, _ = solve_wls(points, centers, n_beta=2)
    lam = baseline_increments(points, psi, centers)
    np.testing.assert_allclose(lam.cumvalues, 0.0, atol=1e-10)


def test_duplicated_column_reports_flat_direction():
    rng = np.random.default_rng(84)
    subjects = []
    for i in range(30):
        x = float(rng.standard_normal())
        subjects.append(
            SubjectData(
                f"s{i}", 10.0, [float(i + 1) / 4.0], [1], [x + rng.normal()],
                {"x1": CovariateSeries(values=[x]), "x2": CovariateSeries(values=[x])},
            )
        )
    cohort = Cohort(tuple(subjects), plain_spec(outcome_fixed=("x1", "x2")), 10.0)
    visiting = handmade_visiting(cohort, StepFunction(np.array([10.0]), np.array([1.0])))
    points = build_visit_points(cohort, visiting, NO_LATENT)
    centers = risk_set_centers(cohort, visiting, NO_LATENT)
    with pytest.raises(FitError, match="flat direction"):
        solve_wls(points, centers, n_beta=2)


def test_all_outcomes_missing_is_an_error():
    cohort = Cohort((subject("a", 10.0, [1.0, 2.0], x=0.5),), plain_spec(), 10.0)
    visiting = handmade_visiting(cohort, StepFunction(np.array([1.0]), np.array([1.0])))
    points = build_visit_points(cohort, visiting, NO_LATENT)
    centers = risk_set_centers(cohort, visiting, NO_LATENT)
    with pytest.raises(FitError, match="no observed outcomes"):
        solve_wls(points, centers, n_beta=1)


def test_single_residual_split_by_total_weight():
    subjects = (
        subject("a", 10.0, [1.0, 2.0], r=[0, 1], y=[np.nan, 4.0], x=0.0),
        subject("b", 10.0, [1.5, 3.0], x=0.0),
    )
    cohort = Cohort(subjects, plain_spec(), 10.0)
    visiting = handmade_visiting(cohort, StepFunction(np.array([1.0]), np.array([1.0])))
    points = build_visit_points(cohort, visiting, NO_LATENT)
    centers = risk_set_centers(cohort, visiting, NO_LATENT)
    assert centers.total_weight[int(centers.index(2.0))] == pytest.approx(2.0)
    lam = baseline_increments(points, np.zeros(1), centers)
    assert lam(1.9) == 0.0
    assert lam(10.0) == pytest.approx(4.0 / 2.0)


# -------------------------------------------------------------- baseline fit


def unit_rate_cohort(n, seed):
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n):
        x = float(rng.standard_normal())
        t = poisson_process_times(rng, 1.0, 10.0)
        r = (rng.uniform(size=t.size) < 0.5).astype(int)
        y = np.where(r == 1, -2.0 + 0.1 * t + 0.5 * x + rng.normal(0.0, 1.0, t.size), np.nan)
        subjects.append(SubjectData(f"s{i}", 10.0, t, r, y, {"x": CovariateSeries(values=[x])}))
    return Cohort(tuple(subjects), plain_spec(), 10.0)


def test_baseline_tracks_integrated_time_trend():
    cohort = unit_rate_cohort(2000, seed=5)
    fit = fit_givehr(cohort)
    grid = np.linspace(0.5, 10.0, 96)
    target = -2.0 * grid + 0.05 * grid**2
    assert np.max(np.abs(fit.baseline(grid) - target)) < 0.45
    assert abs(fit.outcome.beta[0] - 0.5) < 0.06


# ----------------------------------------------------------- full pipeline


@pytest.fixture(scope="module")
def a2_fit():
    cohort, _ = generate(ScenarioSpec("A2", n=300, seed=85))
    return cohort, fit_givehr(cohort)


def test_fit_names_and_serialization(a2_fit):
    _, fit = a2_fit
    assert fit.beta_names == ("F", "X")
    assert fit.theta_names == ("kappa", "kappa:F")
    assert fit.coef_names == ("F", "X", "kappa", "kappa:F")
    assert fit.coefficients.shape == (4,)
    doc = fit.to_dict()
    assert set(doc) >= {"visiting", "observation", "outcome", "baseline_knots", "beta_names", "diagnostics"}
    assert doc["outcome"]["beta"] == fit.outcome.beta.tolist()


def test_shifted_outcome_is_exactly_absorbed_on_balanced_design():
    """With equal weights and one observed visit per subject the observed
    centered designs sum to zero, so a constant shift in Y cannot reach the
    coefficients at all."""
    points, centers = equal_weight_points(87, lambda x1, x2, rng: 0.4 * x1 + rng.normal())
    psi, _, _, _, _ = solve_wls(points, centers, n_beta=2)
    shifted = [VisitPointShim(pt, pt.y + 5.0) for pt in points]
    psi_shift, _, _, _, _ = solve_wls(shifted, centers, n_beta=2)
    np.testing.assert_allclose(psi_shift, psi, atol=1e-10)
    lam = baseline_increments(points, psi, centers)
    lam_shift = baseline_increments(shifted, psi_shift, centers)
    np.testing.assert_allclose(lam_shift.increments - lam.increments, 5.0 / centers.total_weight, atol=1e-10)


class VisitPointShim:
    """A VisitPoint with a replaced outcome value."""

    def __init__(self, pt, y):
        self.subject, self.time, self.weight = pt.subject, pt.time, pt.weight
        self.v, self.r, self.y = pt.v, pt.r, y


def test_adding_a_constant_moves_mostly_the_baseline(a2_fit):
    # on an irregular cohort the observed centered designs sum to zero only
    # in expectation, so a residue of order n^(-1/2) can reach the
    # coefficients; the bulk of the shift must land in the baseline
    cohort, fit = a2_fit
    shifted = Cohort(
        tuple(
            SubjectData(s.id, s.censoring_time, s.visits, s.obs_indicator, s.outcome + 5.0, s.covariates)
            for s in cohort.subjects
        ),
        cohort.covariate_spec,
        cohort.max_followup,
    )
    refit = fit_givehr(shifted)
    delta = refit.coefficients - fit.coefficients
    assert np.nanmax(np.abs(delta)) < 0.05
    assert refit.baseline(cohort.max_followup) - fit.baseline(cohort.max_followup) > 5.0


def test_pinned_latent_collapses_to_plain_weighted_regression():
    cohort, _ = generate(ScenarioSpec("A1", n=200, seed=86))
    with pytest.warns(UserWarning, match="numerically zero"):
        fit = fit_givehr(cohort)
    assert np.isnan(fit.outcome.theta).all()
    assert fit.diagnostics["dropped_columns"] == ["kappa", "kappa:F"]
    assert fit.visiting.sigma_sq == 0.0
    assert fit.observation.convergence["latent_pinned"]

    # with kappa identically zero the fit reduces to the centered regression
    # on the fixed covariates alone
    params = fit.observation.params
    points = build_visit_points(cohort, fit.visiting, params)
    centers = risk_set_centers(cohort, fit.visiting, params)
    n_beta = len(fit.beta_names)
    s_mat = np.zeros((n_beta, n_beta))
    t_vec = np.zeros(n_beta)
    for pt in points:
        if pt.r != 1:
            continue
        h = (pt.v - centers.vbar[int(centers.index(pt.time))])[:n_beta]
        s_mat += np.outer(h, pt.v[:n_beta])
        t_vec += h * pt.y
    np.testing.assert_allclose(np.linalg.solve(s_mat, t_vec), fit.outcome.beta, atol=1e-10)
