"""Stage 2: observation-propensity model with a latent frailty effect.

Each scheduled visit yields a Bernoulli indicator whose success
probability is a probit function of fixed covariates plus a random effect
driven by the (unobserved) log frailty and an independent Gaussian
deviation.  Integrating the probit over the Gaussian frailty posterior
from stage 1 has a closed form, giving a marginal success probability and
a posterior-mean multiplier used later to build compensation covariates.
The parameters are estimated by maximising the resulting composite
Bernoulli likelihood over all visits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import log_ndtr, ndtr

from .dataset import Cohort, role_values
from .visiting import FitError, VisitingFit

GRAD_TOL = 1e-6
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_PROB_FLOOR = 1e-300
_PROB_CEIL = 1.0 - 1e-16


def _log_phi(k):
    return -0.5 * k * k - _LOG_SQRT_2PI


def _mills(k):
    """phi(k) / Phi(k), computed in log space so it stays finite for k << 0."""
    return np.exp(_log_phi(k) - log_ndtr(k))


def probit_kernel(a, b, d, mu_x, var_x):
    """Closed-form Gaussian average of a probit with a random linear shift.

    For X ~ N(mu_x, var_x) and standard-normal noise scaled by ``d``,
    P(a + b X + d eps > 0) = Phi(k) with k = (a + b mu_x) / D and
    D = sqrt(b^2 var_x + d^2).  The success-weighted mean of X is
    mu_x + (b var_x / D) * phi(k) / Phi(k).

    Returns ``(k, mean_prob, weighted_mean)``; broadcasts over arrays.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.asarray(d, dtype=float)
    mu_x = np.asarray(mu_x, dtype=float)
    var_x = np.asarray(var_x, dtype=float)
    if np.any(var_x < 0):
        raise ValueError("var_x must be nonnegative")
    if np.any(d <= 0):
        raise ValueError("the independent-noise scale d must be positive")
    big_d = np.sqrt(b * b * var_x + d * d)
    k = (a + b * mu_x) / big_d
    mean_prob = np.clip(ndtr(k), _PROB_FLOOR, _PROB_CEIL)
    weighted_mean = mu_x + b * var_x / big_d * _mills(k)
    if all(np.isscalar(v) or np.ndim(v) == 0 for v in (a, b, d, mu_x, var_x)):
        return float(k), float(mean_prob), float(weighted_mean)
    return k, mean_prob, weighted_mean


@dataclass(frozen=True)
class ObservationParams:
    """Probit coefficients ``alpha`` (fixed), ``delta`` (latent loading) and
    the covariance ``sigma_q`` of the extra Gaussian deviation."""

    alpha: np.ndarray
    delta: np.ndarray
    sigma_q: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        sigma_q = np.asarray(self.sigma_q, dtype=float)
        if sigma_q.size == 0:
            sigma_q = sigma_q.reshape(0, 0)
        if sigma_q.shape != (delta.size, delta.size):
            raise ValueError("sigma_q must be square with the dimension of delta")
        if not np.allclose(sigma_q, sigma_q.T, atol=1e-10):
            raise ValueError("sigma_q must be symmetric")
        sigma_q = (sigma_q + sigma_q.T) / 2.0
        if sigma_q.size:
            evals = np.linalg.eigvalsh(sigma_q)
            if evals.min() < -1e-8:
                raise ValueError("sigma_q must be positive semidefinite")
            if evals.min() < 0:
                evecs: np.ndarray
                evals_c, evecs = np.linalg.eigh(sigma_q)
                sigma_q = (evecs * np.maximum(evals_c, 0.0)) @ evecs.T
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "sigma_q", sigma_q)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "delta": self.delta.tolist(), "sigma_q": self.sigma_q.tolist()}


@dataclass(frozen=True)
class ObservationFit:
    params: ObservationParams
    loglik: float
    convergence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "loglik": self.loglik, "convergence": dict(self.convergence)}


def _point_terms(x_o, z_o, params: ObservationParams, mu_u, s_u_sq):
    """Kernel pieces for a batch of visit points.

    Returns (k, omega, kappa): the probit argument, the marginal success
    probability, and the success-weighted posterior mean of the frailty.
    """
    a = x_o @ params.alpha
    b = z_o @ params.delta if params.delta.size else np.zeros(x_o.shape[0])
    if params.sigma_q.size:
        quad = np.einsum("ij,jk,ik->i", z_o, params.sigma_q, z_o)
    else:
        quad = np.zeros(x_o.shape[0])
    d = np.sqrt(1.0 + quad)
    k, omega, kappa = probit_kernel(a, b, d, mu_u, s_u_sq)
    return np.atleast_1d(k), np.atleast_1d(omega), np.atleast_1d(kappa)


def marginal_obs_prob(x_o, z_o, eb, params: ObservationParams) -> float:
    """Marginal probability that a visit at this design point is observed."""
    _, omega, _ = _point_terms(np.atleast_2d(x_o), np.atleast_2d(z_o), params, eb.mu_u, eb.s_u_sq)
    return float(omega[0])


def kappa_value(x_o, z_o, eb, params: ObservationParams) -> float:
    """Posterior mean of the standardised log frailty given observation."""
    _, _, kap = _point_terms(np.atleast_2d(x_o), np.atleast_2d(z_o), params, eb.mu_u, eb.s_u_sq)
    return float(kap[0])


def _stack_points(cohort: Cohort, eb_set):
    """Flatten (subject, visit) pairs into design arrays for the likelihood."""
    spec = cohort.covariate_spec
    xs, zs, mus, s2s, rs, owners = [], [], [], [], [], []
    for i, subj in enumerate(cohort.subjects):
        if subj.m == 0:
            continue
        xs.append(role_values(subj, "obs_fixed", subj.visits, spec))
        zs.append(role_values(subj, "obs_random", subj.visits, spec))
        mus.append(np.full(subj.m, eb_set[i].mu_u))
        s2s.append(np.full(subj.m, eb_set[i].s_u_sq))
        rs.append(subj.obs_indicator.astype(float))
        owners.append(np.full(subj.m, i))
    if not xs:
        raise FitError("observation model needs at least one visit")
    return (
        np.vstack(xs),
        np.vstack(zs),
        np.concatenate(mus),
        np.concatenate(s2s),
        np.concatenate(rs),
        np.concatenate(owners).astype(int),
    )


def composite_loglik(cohort: Cohort, eb_set, params: ObservationParams) -> float:
    """Sum of Bernoulli log likelihoods of the marginal observation probabilities."""
    x_o, z_o, mu, s2, r, _ = _stack_points(cohort, eb_set)
    k, _, _ = _point_terms(x_o, z_o, params, mu, s2)
    return float(np.sum(r * log_ndtr(k) + (1.0 - r) * log_ndtr(-k)))


def _pack(alpha, delta, chol):
    tril = np.tril_indices(chol.shape[0])
    ell = chol[tril].copy()
    diag_pos = np.nonzero(tril[0] == tril[1])[0]
    ell[diag_pos] = np.log(np.diag(chol))
    return np.concatenate([alpha, delta, ell])


def _unpack(theta, p, q):
    alpha = theta[:p]
    delta = theta[p : p + q]
    ell = theta[p + q :]
    chol = np.zeros((q, q))
    tril = np.tril_indices(q)
    chol[tril] = ell
    diag = np.exp(np.clip(np.diag(chol).copy(), -50.0, 50.0))
    chol[np.diag_indices(q)] = diag
    return alpha, delta, chol


def _neg_loglik_grad(theta, x_o, z_o, mu, s2, r, p, q):
    alpha, delta, chol = _unpack(theta, p, q)
    a = x_o @ alpha
    b = z_o @ delta if q else np.zeros(x_o.shape[0])
    m_mat = z_o @ chol if q else np.zeros((x_o.shape[0], 0))
    quad = np.einsum("ij,ij->i", m_mat, m_mat)
    dsq = 1.0 + quad + b * b * s2
    big_d = np.sqrt(dsq)
    num = a + b * mu
    k = num / big_d

    ll = np.sum(r * log_ndtr(k) + (1.0 - r) * log_ndtr(-k))
    # d loglik / dk, stable tails on both sides
    g_k = r * _mills(k) - (1.0 - r) * _mills(-k)

    grad_alpha = x_o.T @ (g_k / big_d)
    if q:
        db = mu / big_d - k * b * s2 / dsq
        grad_delta = z_o.T @ (g_k * db)
        # d k / d quad = -k / (2 dsq); d quad / d chol = 2 z (chol' z)'
        c = -g_k * k / dsq
        grad_chol = (z_o * c[:, None]).T @ m_mat
        tril = np.tril_indices(q)
        grad_chol[np.diag_indices(q)] *= np.diag(chol)  # chain rule for log diagonal
        grad_ell = grad_chol[tril]
    else:
        grad_delta = np.zeros(0)
        grad_ell = np.zeros(0)
    grad = np.concatenate([grad_alpha, grad_delta, grad_ell])
    return -ll, -grad


def _probit_start(x_o, r):
    """Plain probit regression ignoring the latent effect; init only."""
    p = x_o.shape[1]
    beta = np.zeros(p)
    for _ in range(25):
        k = x_o @ beta
        g_k = r * _mills(k) - (1.0 - r) * _mills(-k)
        score = x_o.T @ g_k
        # expected information for the probit link
        lam = _mills(k) * _mills(-k)
        fisher = (x_o * lam[:, None]).T @ x_o
        try:
            step = np.linalg.solve(fisher, score)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if np.linalg.norm(step) < 1e-10:
            break
    return beta if np.all(np.isfinite(beta)) else np.zeros(p)


def fit_observation(cohort: Cohort, eb_set, init: ObservationParams | None = None) -> ObservationFit:
    """Maximise the composite observation likelihood.

    The covariance of the extra Gaussian deviation is parameterised by its
    Cholesky factor with log diagonal, keeping it positive semidefinite.
    Convergence requires the gradient norm to fall below 1e-6.
    """
    x_o, z_o, mu, s2, r, _ = _stack_points(cohort, eb_set)
    if r.min() == r.max():
        raise FitError("observation indicators are all equal; propensity model is separated")
    p = x_o.shape[1]
    q = z_o.shape[1]

    # When every subject carries the same zero-mean posterior (the collapsed
    # stage-1 prior), the latent loading and extra covariance only rescale
    # the probit mean and cannot be identified from marginal indicators; the
    # likelihood is then flat along an unbounded ridge.  Pin them at zero and
    # fit the mean parameters alone.
    pinned = bool(q and np.ptp(mu) == 0.0 and mu[0] == 0.0 and np.ptp(s2) == 0.0)
    q_eff = 0 if pinned else q
    z_eff = z_o[:, :0] if pinned else z_o

    if init is not None:
        if init.alpha.size != p or init.delta.size != q:
            raise FitError("init dimensions do not match the covariate roles")
        chol0 = np.linalg.cholesky(init.sigma_q + 1e-8 * np.eye(q_eff)) if q_eff else np.zeros((0, 0))
        theta0 = _pack(init.alpha, init.delta[:q_eff], chol0)
    else:
        alpha0 = _probit_start(x_o, r)
        theta0 = _pack(alpha0, np.zeros(q_eff), 0.1 * np.eye(q_eff))

    data = (x_o, z_eff, mu, s2, r, p, q_eff)
    res = optimize.minimize(
        _neg_loglik_grad,
        theta0,
        args=data,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 2000, "ftol": 1e-16, "gtol": 1e-8, "maxls": 60},
    )
    theta, fval, grad, polish_iters = _newton_polish(res.x, data)
    gnorm = float(np.linalg.norm(grad))
    if gnorm >= GRAD_TOL:
        raise FitError(
            f"observation model did not converge: |grad|={gnorm:.3g} "
            f"(L-BFGS {res.nit} iterations, polish {polish_iters})"
        )
    alpha, delta, chol = _unpack(theta, p, q_eff)
    if pinned:
        delta = np.zeros(q)
        chol = np.zeros((q, q))
    params = ObservationParams(alpha, delta, chol @ chol.T)
    conv = {
        "iterations": int(res.nit),
        "polish_iterations": polish_iters,
        "grad_norm": gnorm,
        "converged": True,
        "latent_pinned": pinned,
    }
    return ObservationFit(params, -float(fval), conv)


def _newton_polish(theta, data, max_iter: int = 40):
    """Drive the gradient norm below tolerance with damped Newton steps.

    The Hessian is finite-differenced from the analytic gradient; damping
    grows whenever a step fails to decrease the objective, so the loop
    degrades gracefully toward gradient descent near flat boundaries.
    """
    k = theta.size
    fval, grad = _neg_loglik_grad(theta, *data)
    lam = 1e-6
    iters = 0
    while np.linalg.norm(grad) >= GRAD_TOL and iters < max_iter:
        iters += 1
        hess = np.empty((k, k))
        for j in range(k):
            h = 1e-6 * (1.0 + abs(theta[j]))
            ej = np.zeros(k)
            ej[j] = h
            _, g_hi = _neg_loglik_grad(theta + ej, *data)
            _, g_lo = _neg_loglik_grad(theta - ej, *data)
            hess[:, j] = (g_hi - g_lo) / (2.0 * h)
        hess = (hess + hess.T) / 2.0
        try:
            step = np.linalg.solve(hess + lam * np.eye(k), -grad)
        except np.linalg.LinAlgError:
            step = -grad
        improved = False
        for _ in range(40):
            cand = theta + step
            f_new, g_new = _neg_loglik_grad(cand, *data)
            if np.isfinite(f_new) and f_new <= fval + 1e-12:
                theta, fval, grad = cand, f_new, g_new
                lam = max(lam / 3.0, 1e-10)
                improved = True
                break
            step = step / 2.0
            lam = min(lam * 3.0, 1e6)
        if not improved:
            break
    return theta, fval, grad, iters


def point_weights_terms(cohort: Cohort, visiting: VisitingFit, params: ObservationParams, times_by_subject):
    """omega and kappa for arbitrary per-subject time grids.

    ``times_by_subject`` is a sequence of 1-d arrays, one per subject.
    Returns lists of (omega, kappa) arrays aligned with the inputs.
    """
    spec = cohort.covariate_spec
    omegas, kappas = [], []
    for subj, eb, times in zip(cohort.subjects, visiting.eb, times_by_subject):
        times = np.asarray(times, dtype=float)
        if times.size == 0:
            omegas.append(np.empty(0))
            kappas.append(np.empty(0))
            continue
        x_o = role_values(subj, "obs_fixed", times, spec)
        z_o = role_values(subj, "obs_random", times, spec)
        _, om, kap = _point_terms(x_o, z_o, params, eb.mu_u, eb.s_u_sq)
        omegas.append(om)
        kappas.append(kap)
    return omegas, kappas
