"""Cohort generators for the simulation settings and replication studies.

Settings A.1-A.4 vary how informative the visit process is under a
correctly specified model; B.1-B.6 stress the fitted visit model with
mechanisms it does not cover (latent-only rates, gamma frailty,
lagged-outcome feedback, threshold visiting, and a per-subject mixture);
C.1-C.6 reuse the B visit mechanisms with a logistic, covariate-only
observation model.  Ground truth is returned alongside each cohort so
oracle-mode tests can score estimators against the generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import exp, sqrt

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, ndtr

from .dataset import Cohort, CovariateSeries, CovariateSpec, SubjectData
from .visiting import FitError

SCENARIOS = ("A1", "A2", "A3", "A4", "B1", "B2", "B3", "B4", "B5", "B6", "C1", "C2", "C3", "C4", "C5", "C6")

# fixed stream labels so each draw purpose has its own substream
_S_COVARIATES, _S_LATENT, _S_RANEF, _S_FRAILTY, _S_VISITS, _S_OBS, _S_NOISE, _S_MECH = range(1, 9)

A1_SPACING = 5.0


def normalize_scenario(scenario: str) -> str:
    sc = scenario.strip().upper().replace(".", "")
    if sc not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    return sc


@dataclass(frozen=True)
class ScenarioSpec:
    """Data-generating configuration for one simulated cohort.

    ``mu_b_loading`` sets how strongly the scenario's latent variable
    shifts the mean of the outcome random effects.  Left as ``None`` it
    resolves per scenario family: (0.5, 0.2) for A4, (0.5, 0.55) for the
    B and C families, and zero elsewhere.
    """

    scenario: str
    n: int = 1000
    tau: float = 60.0
    beta0: float = -2.0
    beta_t: float = 0.1
    beta_f: float = -0.5
    beta_x: float = 0.5
    mu_b_loading: tuple | None = None
    sigma_b_diag: tuple = (1.0, 2.0)
    sigma_eps: float = 1.0
    latent_a: float = 0.0
    seed: object = 0

    def __post_init__(self):
        object.__setattr__(self, "scenario", normalize_scenario(self.scenario))
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.sigma_b_diag) < 0:
            raise ValueError("random-effect variances must be nonnegative")

    @property
    def loading(self) -> tuple:
        """Latent-to-random-effect mean loadings, resolved per scenario."""
        if self.mu_b_loading is not None:
            return tuple(float(v) for v in self.mu_b_loading)
        if self.scenario == "A4":
            return (0.5, 0.2)
        if self.scenario[0] in ("B", "C"):
            return (0.5, 0.55)
        return (0.0, 0.0)

    @property
    def true_params(self) -> dict:
        return {
            "beta0": self.beta0,
            "beta_t": self.beta_t,
            "beta_F": self.beta_f,
            "beta_X": self.beta_x,
            "sigma_b_diag": list(self.sigma_b_diag),
            "sigma_eps": self.sigma_eps,
            "mu_b_loading": list(self.loading),
            "latent_a": self.latent_a,
        }


@dataclass(frozen=True)
class SimTruth:
    """Generator-side quantities stored next to a simulated cohort."""

    scenario: str
    params: dict
    latent: np.ndarray | None
    eta: np.ndarray | None
    b: np.ndarray
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "params": self.params,
            "latent": None if self.latent is None else self.latent.tolist(),
            "eta": None if self.eta is None else self.eta.tolist(),
            "b": self.b.tolist(),
            "extras": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.extras.items()},
        }


def simulated_covariate_spec() -> CovariateSpec:
    """Role assignment used when fitting the simulated cohorts."""
    return CovariateSpec(
        visiting=("F", "X"),
        obs_fixed=("F", "X"),
        obs_random=("F",),
        outcome_fixed=("F", "X"),
        outcome_random=("F",),
        intercepts=frozenset({"obs_fixed", "obs_random", "outcome_random"}),
    )


def _seed_key(seed) -> tuple:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def _stream(seed, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((*_seed_key(seed), purpose)))


def poisson_process_times(rng: np.random.Generator, rate: float, tau: float) -> np.ndarray:
    """Homogeneous Poisson event times on (0, tau] via exponential gaps."""
    if rate <= 0:
        return np.empty(0)
    times = []
    t = rng.exponential(1.0 / rate)
    while t <= tau:
        times.append(t)
        t += rng.exponential(1.0 / rate)
    return np.asarray(times)


def _lagged_outcome_visits(rng, a_i, slope, sigma_eps, tau):
    """Visits whose constant rate refreshes to exp(-3 + 0.8 Y) at each visit.

    The first interval uses a measurement taken at time zero; every visit
    records the outcome (with fresh measurement error) and resets the rate.
    """
    y_prev = a_i + sigma_eps * rng.standard_normal()
    t = 0.0
    times, ys = [], []
    while True:
        rate = exp(min(-3.0 + 0.8 * y_prev, 30.0))
        t += rng.exponential(1.0 / rate)
        if t > tau:
            break
        y = a_i + slope * t + sigma_eps * rng.standard_normal()
        times.append(t)
        ys.append(y)
        y_prev = y
    return np.asarray(times), np.asarray(ys)


def threshold_quantile(spec: ScenarioSpec) -> float:
    """60th percentile of the noise-free outcome level across the population.

    The trend is common to everyone, so the time-t percentile is this value
    plus beta_t * t and the visit-acceptance rule reduces to a fixed cut on
    each subject's level a_i = Y_i(0) - noise.
    """
    l0, l1 = spec.loading
    a = spec.latent_a
    m0, m1 = spec.beta0, spec.beta0 + spec.beta_f
    v0 = (spec.beta_x + l0 * a) ** 2 + l0**2 + spec.sigma_b_diag[0]
    v1 = (spec.beta_x + (l0 + l1) * a) ** 2 + (l0 + l1) ** 2 + spec.sigma_b_diag[0] + spec.sigma_b_diag[1]
    s0, s1 = sqrt(v0), sqrt(v1)

    def cdf(c):
        return 0.5 * ndtr((c - m0) / s0) + 0.5 * ndtr((c - m1) / s1) - 0.6

    lo = min(m0 - 10 * s0, m1 - 10 * s1)
    hi = max(m0 + 10 * s0, m1 + 10 * s1)
    return float(brentq(cdf, lo, hi, xtol=1e-12))


def _visit_mechanism(sc: str) -> str:
    """Map a scenario id to its visit-mechanism family (C.k borrows B.k)."""
    if sc.startswith("C"):
        return "B" + sc[1]
    return sc


def _observation_probs(sc, f, x, latent):
    if sc == "A1":
        return np.full(f.size, 0.5)
    if sc in ("A2", "A3"):
        return expit(-0.5 * f - 0.5 * x)
    if sc == "A4":
        return ndtr(2.0 + f - x + (-0.2 - 0.6 * f) * latent)
    if sc.startswith("B"):
        return ndtr(0.2 + 0.4 * f + 0.3 * x + 0.8 * latent + 0.5 * f * latent)
    return expit(1.0 * f + 1.0 * x)


def generate(spec: ScenarioSpec):
    """Draw one cohort; returns ``(Cohort, SimTruth)``.

    Identical specs (including seed) give bitwise-identical cohorts: every
    draw purpose has its own seeded substream and subjects are processed
    in index order.
    """
    sc = spec.scenario
    n, tau = spec.n, spec.tau
    rng_cov = _stream(spec.seed, _S_COVARIATES)
    f = rng_cov.binomial(1, 0.5, n).astype(float)
    x = rng_cov.standard_normal(n)

    latent = None
    if sc == "A4" or sc[0] in ("B", "C"):
        latent = spec.latent_a * x + _stream(spec.seed, _S_LATENT).standard_normal(n)

    l0, l1 = spec.loading
    rng_b = _stream(spec.seed, _S_RANEF)
    b = rng_b.standard_normal((n, 2)) * np.sqrt(np.asarray(spec.sigma_b_diag))
    if latent is not None:
        b = b + np.column_stack([l0 * latent, l1 * latent])

    eta = None
    mech = _visit_mechanism(sc)
    if sc == "A3":
        eta = _stream(spec.seed, _S_FRAILTY).gamma(shape=np.exp(-0.3 * b[:, 1]), scale=1.0)
    elif sc == "A4":
        eta = np.exp(-0.5 + latent)
    elif mech in ("B3", "B6"):
        phi = np.exp(1.0 - 0.6 * latent)
        eta = _stream(spec.seed, _S_FRAILTY).gamma(shape=phi, scale=1.0 / phi)

    a_level = spec.beta0 + spec.beta_f * f + spec.beta_x * x + b[:, 0] + b[:, 1] * f

    mechanisms = np.zeros(n, dtype=int)
    if mech == "B6":
        mechanisms = _stream(spec.seed, _S_MECH).integers(1, 6, size=n)
    b5_cut = None
    if mech in ("B5", "B6"):
        b5_cut = threshold_quantile(spec)

    rng_v = _stream(spec.seed, _S_VISITS)
    visits = []
    b4_ys = {}
    for i in range(n):
        mech_i = mech if mech != "B6" else f"B{mechanisms[i]}"
        if mech_i == "A1":
            v = np.arange(A1_SPACING, tau + 1e-9, A1_SPACING)
        elif mech_i in ("A2", "A3", "A4"):
            rate = exp(-3.5 + f[i] + x[i]) * (1.0 if eta is None else eta[i])
            v = poisson_process_times(rng_v, rate, tau)
        elif mech_i == "B1":
            v = poisson_process_times(rng_v, exp(-2.5 + 0.8 * latent[i]), tau)
        elif mech_i == "B2":
            v = poisson_process_times(rng_v, exp(-2.5 + 0.3 * f[i] + 0.3 * x[i] + 0.8 * latent[i]), tau)
        elif mech_i == "B3":
            v = poisson_process_times(rng_v, eta[i] * exp(-2.5 + 0.3 * f[i] + 0.3 * x[i]), tau)
        elif mech_i == "B4":
            v, ys = _lagged_outcome_visits(rng_v, a_level[i], spec.beta_t, spec.sigma_eps, tau)
            b4_ys[i] = ys
        elif mech_i == "B5":
            v = poisson_process_times(rng_v, 1.0, tau) if a_level[i] > b5_cut else np.empty(0)
        else:
            raise ValueError(f"unknown visit mechanism {mech_i!r}")
        visits.append(v)

    obs_p = _observation_probs(sc, f, x, latent)
    rng_o = _stream(spec.seed, _S_OBS)
    r_flags = [rng_o.binomial(1, obs_p[i], size=visits[i].size) for i in range(n)]

    rng_y = _stream(spec.seed, _S_NOISE)
    subjects = []
    cov_spec = simulated_covariate_spec()
    for i in range(n):
        v = visits[i]
        if i in b4_ys:
            y = b4_ys[i]
        else:
            y = a_level[i] + spec.beta_t * v + spec.sigma_eps * rng_y.standard_normal(v.size)
        y = np.where(r_flags[i] == 1, y, np.nan)
        subjects.append(
            SubjectData(
                id=f"s{i + 1:05d}",
                censoring_time=tau,
                visits=v,
                obs_indicator=r_flags[i],
                outcome=y,
                covariates={
                    "F": CovariateSeries(values=[f[i]]),
                    "X": CovariateSeries(values=[x[i]]),
                },
            )
        )

    extras = {}
    if mech == "B6":
        extras["mechanisms"] = mechanisms
    if b5_cut is not None:
        extras["b5_threshold"] = b5_cut
    truth = SimTruth(sc, spec.true_params, latent, eta, b, extras)
    return Cohort(tuple(subjects), cov_spec, tau), truth


@dataclass(frozen=True)
class BenchmarkRow:
    scenario: str
    estimator: str
    n_reps: int
    n_failed: int
    bias: float
    rmse: float
    mean_se: float | None = None
    flagged: bool = False


@dataclass(frozen=True)
class BenchmarkTable:
    rows: tuple
    estimates: dict = field(default_factory=dict)
    ses: dict = field(default_factory=dict)

    def row(self, estimator: str) -> BenchmarkRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)


def _fit_one_rep(args):
    spec, seed, rep, estimators, se_method = args
    from .baselines import ESTIMATORS

    cohort, _ = generate(replace(spec, seed=(*_seed_key(seed), rep)))
    out = {}
    for est in estimators:
        try:
            names, coef, se = ESTIMATORS[est](cohort, se_method if est == "givehr" else None)
            idx = names.index("F")
            out[est] = (float(coef[idx]), None if se is None else float(se[idx]))
        except (FitError, np.linalg.LinAlgError, ValueError) as exc:
            out[est] = ("failed", str(exc))
    return out


def run_replications(spec: ScenarioSpec, estimators, n_reps: int, seed: int = 0, threads: int = 1, se_method=None) -> BenchmarkTable:
    """Fit each estimator on ``n_reps`` fresh cohorts and tabulate bias/RMSE.

    Bias and RMSE are for the coefficient on F against the generating
    value.  Replicates where an estimator fails are excluded from that
    estimator's summaries and counted.  Output is independent of
    ``threads``.
    """
    from .baselines import ESTIMATORS

    for est in estimators:
        if est not in ESTIMATORS:
            raise ValueError(f"unknown estimator {est!r}; registered: {', '.join(sorted(ESTIMATORS))}")
    jobs = [(spec, seed, r, tuple(estimators), se_method) for r in range(n_reps)]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            per_rep = list(pool.map(_fit_one_rep, jobs, chunksize=max(1, n_reps // (4 * threads))))
    else:
        per_rep = [_fit_one_rep(j) for j in jobs]

    true_bf = spec.beta_f
    rows = []
    estimates: dict = {}
    ses: dict = {}
    for est in estimators:
        vals, se_vals, failed = [], [], 0
        for rep in per_rep:
            res = rep[est]
            if res[0] == "failed":
                failed += 1
            else:
                vals.append(res[0])
                if res[1] is not None:
                    se_vals.append(res[1])
        arr = np.asarray(vals)
        estimates[est] = arr
        ses[est] = np.asarray(se_vals) if se_vals else None
        if arr.size == 0:
            rows.append(BenchmarkRow(spec.scenario, est, 0, failed, float("nan"), float("nan"), None, flagged=True))
            continue
        bias = float(np.mean(arr) - true_bf)
        rmse = float(np.sqrt(np.mean((arr - true_bf) ** 2)))
        mean_se = float(np.mean(se_vals)) if se_vals else None
        rows.append(BenchmarkRow(spec.scenario, est, arr.size, failed, bias, rmse, mean_se))
    return BenchmarkTable(tuple(rows), estimates, ses)
