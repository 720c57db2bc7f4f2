"""Simplified Laplace inference for the latent Gaussian mortality model.

Constrained Newton mode-finding for the latent field, Laplace
approximation of the hyperparameter posterior, derivative-free
optimization plus an axis evaluation grid, Gaussian posterior marginals
mixed over the grid, and DIC.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import gammaln, xlogy

from .errors import NumericalError, ValidationError
from .covariate_engine import COVARIATE_NAMES
from .gmrf_core import (GmrfFactor, constrained_logdet, constrained_marginal_variances,
                        constrained_sample, constrained_solve, DENSE_CUTOFF)
from .model import GenderModel, HyperParams

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class InferenceSettings:
    """Tolerances and budgets of the inference pipeline; recorded in output metadata."""

    newton_tol: float = 1e-8          # relative linear-predictor change
    newton_max_iter: int = 50
    max_step_halvings: int = 10
    simplex_fatol: float = 1e-4
    simplex_xatol: float = 1e-3
    simplex_maxfev: int = 400
    grid_enabled: bool = True
    fd_step: float = 0.1              # internal-scale step for the Hessian estimate
    grid_step_bounds: tuple[float, float] = (0.05, 3.0)
    latent_solver: str = "auto"       # "reduced" below the dense cutoff, else "kriging"
    variance_draws: int = 2000        # sampling fallback above the dense cutoff
    dic_draws: int = 1000
    dense_cutoff: int = DENSE_CUTOFF
    seed: int = 0


@dataclass
class GaussianApprox:
    """Gaussian approximation of the latent posterior at fixed hyperparameters."""

    mode: np.ndarray
    eta: np.ndarray
    Q_star: sp.csr_matrix
    converged: bool                # relative predictor change fell below tolerance
    n_iter: int
    objective_trace: list[float]
    logdet_constrained: float
    prior_quad: float
    stop_reason: str = "predictor_change"
    factor: GmrfFactor = field(repr=False, default=None)
    basis: np.ndarray = field(repr=False, default=None)
    reduced_chol: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class FixedEffectSummary:
    name: str
    mean: float
    median: float
    ci_low: float
    ci_high: float
    sd: float
    significant: bool


@dataclass(frozen=True)
class BlockSummary:
    name: str
    keys: tuple
    mean: np.ndarray
    sd: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray


@dataclass(frozen=True)
class DicResult:
    dic: float
    dic_saturated: float
    p_eff: float
    mean_deviance: float
    n_draws: int


@dataclass
class GridPoint:
    theta: HyperParams
    internal: np.ndarray
    log_posterior: float
    weight: float
    approx: GaussianApprox | None = field(repr=False, default=None)


@dataclass
class FitResult:
    gender: str
    fixed_effects: list[FixedEffectSummary]
    random_effects: dict[str, BlockSummary]
    hyper_mode: HyperParams
    grid: list[GridPoint]
    dic: DicResult | None
    metadata: dict


# ---------------------------------------------------------------------------
# mode finding
# ---------------------------------------------------------------------------

def _initial_latent(model: GenderModel) -> np.ndarray:
    x = np.zeros(model.layout.total_dim)
    lik = model.likelihood
    if lik.name == "poisson":
        x[0] = math.log((float(np.sum(lik.y)) + 0.5) / float(np.sum(lik.population)))
    else:
        x[0] = float(np.mean(lik.y))
    return x


def _use_reduced_solver(model: GenderModel, settings: InferenceSettings) -> bool:
    if settings.latent_solver == "reduced":
        return True
    if settings.latent_solver == "kriging":
        return False
    if settings.latent_solver != "auto":
        raise ValidationError(f"unknown latent solver {settings.latent_solver!r}")
    return model.layout.total_dim <= settings.dense_cutoff


def newton_mode(model: GenderModel, theta: HyperParams,
                warm_start: np.ndarray | None = None,
                settings: InferenceSettings = InferenceSettings()) -> GaussianApprox:
    """Find the constrained posterior mode of the latent field at fixed theta.

    Iteratively reweighted constrained solves: each step minimizes the
    local quadratic model of the penalized log-likelihood subject to the
    constraint set, with step-halving whenever the objective would
    decrease. Stops when the relative linear-predictor change falls
    below `newton_tol`. Below the dense cutoff the constrained solve
    works directly in an orthonormal basis of the constraint surface;
    above it the sparse factor-and-kriging route is used.
    """
    Q_p = model.joint_prior_precision(theta)
    A = model.constraints
    lik, M, Mt = model.likelihood, model.M, model.Mt
    reduced = _use_reduced_solver(model, settings)
    B = model.constraint_basis() if reduced else None
    if warm_start is not None:
        x = A.project(np.array(warm_start, dtype=float))
    else:
        x = _initial_latent(model)
    eta = M @ x

    def objective(x_, eta_):
        return lik.loglik(eta_) - 0.5 * float(x_ @ (Q_p @ x_))

    def curvature(W_):
        return (Q_p + Mt @ sp.diags(W_) @ M).tocsc()

    K_prior = model.reduced_prior_precision(theta) if reduced else None

    def reduced_cholesky(W_):
        S_lik = Mt @ sp.diags(W_) @ M
        K = K_prior + B.T @ (S_lik @ B)
        try:
            return sla.cholesky(K, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            pass
        # flat directions that the likelihood no longer informs (for example a
        # free intercept when every fitted mean collapses to zero): same
        # diagonal-jitter rule as the sparse factorization
        ridge = 1e-8 * max(float(np.max(np.diag(K))), 1.0)
        try:
            return sla.cholesky(K + ridge * np.eye(K.shape[0]), lower=True,
                                check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("curvature not positive definite on the "
                                 "constraint surface") from exc

    obj = objective(x, eta)
    if not np.isfinite(obj):
        raise NumericalError("objective not finite at the Newton starting point")
    trace = [obj]
    converged = False
    L = None
    factor = None
    W = None
    for it in range(1, settings.newton_max_iter + 1):
        W = lik.weights(eta)
        if not np.all(np.isfinite(W)):
            raise NumericalError("non-finite likelihood weights (linear predictor overflow)")
        b = Mt @ (W * eta + lik.grad(eta))
        if reduced:
            L = reduced_cholesky(W)
            z = sla.cho_solve((L, True), B.T @ b)
            x_prop = B @ z
        else:
            Q_star = curvature(W)
            factor = GmrfFactor(Q_star, A, assume_singular=True,
                                constraint_gram=model.constraint_gram())
            x_prop = constrained_solve(Q_star, b, A, factor=factor)
        direction = x_prop - x
        step = 1.0
        slack = 1e-9 * (1.0 + abs(obj))
        for _ in range(settings.max_step_halvings + 1):
            x_new = x + step * direction
            eta_new = M @ x_new
            obj_new = objective(x_new, eta_new)
            if np.isfinite(obj_new) and obj_new >= obj - slack:
                break
            step *= 0.5
        else:
            raise NumericalError(
                f"step halving failed at Newton iteration {it}; trace: {trace}")
        rel = float(np.max(np.abs(eta_new - eta))) / (1.0 + float(np.max(np.abs(eta_new))))
        stagnant = abs(obj_new - obj) <= 1e-12 * (1.0 + abs(obj_new))
        x, eta, obj = x_new, eta_new, obj_new
        trace.append(obj)
        if rel < settings.newton_tol:
            converged = True
            stop_reason = "predictor_change"
            break
        if stagnant and it >= 2:
            # flat, likelihood-free directions (for example the free intercept
            # under an all-zero count vector) move forever without changing the
            # objective; a stagnant objective is an accepted finite mode, but
            # the converged flag stays reserved for the predictor criterion
            stop_reason = "objective_stagnation"
            logger.warning("Newton stopped on a stagnant objective after %d iterations", it)
            break
    else:
        raise NumericalError(
            f"Newton did not converge in {settings.newton_max_iter} iterations; "
            f"objective trace: {trace}")
    # Curvature carried over from the convergence-triggering iteration: it is
    # evaluated within newton_tol of the mode (exactly at it for constant-
    # weight likelihoods). Q_star itself is rebuilt at the accepted mode.
    Q_star = curvature(lik.weights(eta))
    reduced_chol = None
    if reduced:
        reduced_chol = L
        logdet = float(2.0 * np.sum(np.log(np.diag(L))))
    else:
        logdet, _ = constrained_logdet(Q_star, A, method="sparse", factor=factor)
    return GaussianApprox(mode=x, eta=eta, Q_star=Q_star, converged=converged,
                          n_iter=len(trace) - 1, objective_trace=trace,
                          logdet_constrained=logdet,
                          prior_quad=float(x @ (Q_p @ x)), stop_reason=stop_reason,
                          factor=factor, basis=B, reduced_chol=reduced_chol)


# ---------------------------------------------------------------------------
# hyperparameter posterior
# ---------------------------------------------------------------------------

def log_marginal_likelihood(model: GenderModel, theta: HyperParams,
                            warm_start: np.ndarray | None = None,
                            settings: InferenceSettings = InferenceSettings()
                            ) -> tuple[float, GaussianApprox]:
    """Laplace approximation of log pi(y | theta).

    Exact for Gaussian likelihoods. Improper flat prior directions (the
    default intercept) contribute a Lebesgue factor of (2 pi)^(1/2) each,
    which keeps the value finite and comparable across theta.
    """
    ga = newton_mode(model, theta, warm_start=warm_start, settings=settings)
    ll = model.likelihood.loglik(ga.eta)
    prior_logdet, n_flat = model.prior_constrained_logdet(theta)
    val = (ll - 0.5 * ga.prior_quad + 0.5 * prior_logdet - 0.5 * ga.logdet_constrained
           + 0.5 * n_flat * LOG_2PI)
    return val, ga


def log_posterior_theta(model: GenderModel, theta: HyperParams,
                        warm_start: np.ndarray | None = None,
                        settings: InferenceSettings = InferenceSettings()
                        ) -> tuple[float, GaussianApprox]:
    """Unnormalized log posterior of the hyperparameters after integrating out the latent field."""
    lml, ga = log_marginal_likelihood(model, theta, warm_start=warm_start, settings=settings)
    return lml + model.log_prior_hyper(theta), ga


def optimize_theta(model: GenderModel, init: HyperParams | None = None,
                   settings: InferenceSettings = InferenceSettings()
                   ) -> tuple[HyperParams, list[GridPoint], dict]:
    """Optimize the hyperparameter posterior and build a local evaluation grid.

    Derivative-free simplex optimization on the internal scale
    (log-precisions, logit mixing weight), then a grid of the center plus
    one step out along each of the seven internal axes, with steps from a
    finite-difference Hessian estimate and normalized posterior weights.
    """
    init = init or HyperParams.default()
    state = {"warm": None, "best_val": -math.inf, "best_vec": None, "n_eval": 0}

    def neg_log_post(vec):
        state["n_eval"] += 1
        try:
            theta = HyperParams.from_internal(vec)
            val, ga = log_posterior_theta(model, theta, warm_start=state["warm"],
                                          settings=settings)
        except (ValidationError, NumericalError, OverflowError):
            return 1e30
        state["warm"] = ga.mode
        if val > state["best_val"]:
            state["best_val"], state["best_vec"] = val, np.array(vec)
        return -val

    def run_simplex(start, budget):
        res = minimize(neg_log_post, start, method="Nelder-Mead",
                       options=dict(fatol=settings.simplex_fatol,
                                    xatol=settings.simplex_xatol,
                                    maxfev=budget, adaptive=True))
        if not bool(res.success):
            logger.warning("simplex optimizer stalled after %d evaluations; "
                           "keeping best point", state["n_eval"])
        return not bool(res.success)

    def build_grid(center):
        vecs = [center]
        if settings.grid_enabled:
            lp_c = -neg_log_post(center)
            h = settings.fd_step
            lo, hi = settings.grid_step_bounds
            for axis in range(len(center)):
                e = np.zeros_like(center)
                e[axis] = h
                lp_plus = -neg_log_post(center + e)
                lp_minus = -neg_log_post(center - e)
                hess = -(lp_plus + lp_minus - 2.0 * lp_c) / h**2
                step = 1.0 / math.sqrt(hess) if hess > 0 else hi
                step = min(max(step, lo), hi)
                e[axis] = step
                vecs.append(center + e)
                vecs.append(center - e)
        pts = []
        for vec in vecs:
            theta = HyperParams.from_internal(vec)
            lp, ga = log_posterior_theta(model, theta, warm_start=state["warm"],
                                         settings=settings)
            pts.append(GridPoint(theta=theta, internal=vec, log_posterior=lp,
                                 weight=0.0, approx=ga))
        return pts

    v0 = init.to_internal()
    # the initial point must be evaluable; failures here are fatal rather
    # than treated as explorable bad regions
    val0, ga0 = log_posterior_theta(model, HyperParams.from_internal(v0),
                                    settings=settings)
    if not np.isfinite(val0):
        raise ValidationError("hyperparameter objective is not finite at the initial value")
    state.update(warm=ga0.mode, best_val=val0, best_vec=np.array(v0), n_eval=1)
    stalled = run_simplex(v0, settings.simplex_maxfev)
    points = build_grid(state["best_vec"])
    # the returned mode must dominate its grid: if a neighbour wins, restart
    # a short search from it and rebuild (bounded number of times)
    for _ in range(2):
        best = int(np.argmax([p.log_posterior for p in points]))
        if best == 0 or points[best].log_posterior <= (points[0].log_posterior
                                                       + settings.simplex_fatol):
            break
        stalled = run_simplex(points[best].internal,
                              max(settings.simplex_maxfev // 2, 50)) or stalled
        points = build_grid(state["best_vec"])

    lps = np.array([p.log_posterior for p in points])
    w = np.exp(lps - np.max(lps))
    w /= np.sum(w)
    for p, wi in zip(points, w):
        p.weight = float(wi)
    theta_mode = points[0].theta
    diagnostics = {"n_eval": state["n_eval"], "stalled": stalled,
                   "log_posterior_mode": float(points[0].log_posterior),
                   "newton_iterations_mode": points[0].approx.n_iter}
    return theta_mode, points, diagnostics


# ---------------------------------------------------------------------------
# posterior summaries
# ---------------------------------------------------------------------------

def _marginal_variances(model: GenderModel, approx: GaussianApprox,
                        settings: InferenceSettings, seed: int) -> np.ndarray:
    if approx.reduced_chol is not None:
        G = sla.solve_triangular(approx.reduced_chol, approx.basis.T, lower=True)
        return np.einsum("ij,ij->j", G, G)
    n = model.layout.total_dim
    if n <= settings.dense_cutoff:
        return constrained_marginal_variances(approx.Q_star, model.constraints,
                                              method="dense", basis=model.constraint_basis())
    return constrained_marginal_variances(approx.Q_star, model.constraints, method="sample",
                                          ndraws=settings.variance_draws, seed=seed)


def sample_latent(model: GenderModel, approx: GaussianApprox, count: int,
                  seed: int) -> np.ndarray:
    """Draw from the constrained Gaussian approximation around its mode."""
    if approx.reduced_chol is not None:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((approx.reduced_chol.shape[0], count))
        x = approx.basis @ sla.solve_triangular(approx.reduced_chol.T, z, lower=False)
        return x.T + approx.mode
    return constrained_sample(approx.Q_star, model.constraints, count, seed=seed,
                              mean=approx.mode, factor=approx.factor)


def posterior_summaries(model: GenderModel, grid: list[GridPoint],
                        settings: InferenceSettings = InferenceSettings()) -> FitResult:
    """Gaussian posterior marginals per latent coordinate, averaged over grid weights.

    Means come from the per-point modes, variances from the constrained
    marginal variances (exact dense inversion up to the cutoff, sampling
    beyond it); medians equal means under the Gaussian approximation and
    the 95% interval is mean +/- 1.96 sd. The significance flag marks
    intervals that exclude zero.
    """
    if not grid:
        raise ValidationError("empty hyperparameter grid")
    means = np.zeros(model.layout.total_dim)
    second = np.zeros(model.layout.total_dim)
    for g_i, point in enumerate(grid):
        approx = point.approx
        if approx is None:
            _, approx = log_posterior_theta(model, point.theta, settings=settings)
        var_g = _marginal_variances(model, approx, settings, seed=settings.seed + g_i)
        means += point.weight * approx.mode
        second += point.weight * (var_g + approx.mode**2)
    variance = np.maximum(second - means**2, 0.0)
    sd = np.sqrt(variance)
    ci_low = means - 1.96 * sd
    ci_high = means + 1.96 * sd

    layout = model.layout
    fixed = []
    for name, idx in [("intercept", 0)] + [(n_, 1 + k) for k, n_ in enumerate(COVARIATE_NAMES)]:
        fixed.append(FixedEffectSummary(
            name=name, mean=float(means[idx]), median=float(means[idx]),
            ci_low=float(ci_low[idx]), ci_high=float(ci_high[idx]), sd=float(sd[idx]),
            significant=bool(ci_low[idx] > 0.0 or ci_high[idx] < 0.0)))

    week_labels = tuple(f"{y}-W{w:02d}" for (y, w) in model.weeks)
    ages = ("0-64", "65-74", "75-84", "85+")
    keys = {
        "phi": tuple(model.district_ids),
        "delta": ages,
        "psi": week_labels,
        "zeta_sa": tuple((d, a) for d in model.district_ids for a in ages),
        "zeta_st": tuple((d, wl) for d in model.district_ids for wl in week_labels),
        "zeta_at": tuple((wl, a) for wl in week_labels for a in ages),
    }
    random_effects = {}
    for name in ("phi", "delta", "psi", "zeta_sa", "zeta_st", "zeta_at"):
        s = layout.block_slice(name)
        random_effects[name] = BlockSummary(
            name=name, keys=keys[name], mean=means[s].copy(), sd=sd[s].copy(),
            ci_low=ci_low[s].copy(), ci_high=ci_high[s].copy())

    return FitResult(gender=model.gender, fixed_effects=fixed, random_effects=random_effects,
                     hyper_mode=grid[0].theta, grid=grid, dic=None,
                     metadata={"n_grid": len(grid)})


# ---------------------------------------------------------------------------
# DIC
# ---------------------------------------------------------------------------

def compute_dic(model: GenderModel, theta: HyperParams,
                settings: InferenceSettings = InferenceSettings(),
                approx: GaussianApprox | None = None) -> DicResult:
    """Deviance information criterion from posterior draws at the given theta.

    Deviance is -2 log pi(y | x); the effective parameter count is the
    mean posterior deviance minus the deviance at the posterior mean.
    The saturated variant measures deviance against the model with
    fitted mean equal to each observation.
    """
    if settings.dic_draws < 100:
        raise ValidationError(f"DIC needs at least 100 draws, got {settings.dic_draws}")
    if approx is None:
        approx = newton_mode(model, theta, settings=settings)
    draws = sample_latent(model, approx, settings.dic_draws, seed=settings.seed + 104729)
    lik = model.likelihood
    deviances = np.array([-2.0 * lik.loglik(model.M @ d) for d in draws])
    d_bar = float(np.mean(deviances))
    d_mode = -2.0 * lik.loglik(approx.eta)
    p_eff = d_bar - d_mode
    if p_eff < 0:
        logger.warning("negative effective parameter count %.3f (sampling noise?)", p_eff)
    dic = d_bar + p_eff
    dic_saturated = dic + 2.0 * lik.saturated_loglik()
    return DicResult(dic=dic, dic_saturated=dic_saturated, p_eff=p_eff,
                     mean_deviance=d_bar, n_draws=settings.dic_draws)


def fit_intercept_only(y, population, n_draws: int = 1000, seed: int = 0) -> DicResult:
    """DIC of the intercept-only Poisson baseline (flat prior on the intercept)."""
    y = np.asarray(y, dtype=float)
    n = np.asarray(population, dtype=float)
    log_n = np.log(n)
    const = -float(np.sum(gammaln(y + 1.0)))

    def loglik(a):
        return float(np.sum(y * (log_n + a)) - math.exp(a) * np.sum(n)) + const

    alpha = math.log((float(np.sum(y)) + 0.5) / float(np.sum(n)))
    for _ in range(50):
        mu_sum = math.exp(alpha) * float(np.sum(n))
        step = (float(np.sum(y)) - mu_sum) / mu_sum
        alpha += step
        if abs(step) < 1e-12:
            break
    var = 1.0 / (math.exp(alpha) * float(np.sum(n)))
    rng = np.random.default_rng(seed)
    draws = alpha + math.sqrt(var) * rng.standard_normal(n_draws)
    deviances = np.array([-2.0 * loglik(a) for a in draws])
    d_bar = float(np.mean(deviances))
    p_eff = d_bar - (-2.0 * loglik(alpha))
    sat = float(np.sum(xlogy(y, y)) - np.sum(y)) + const
    dic = d_bar + p_eff
    return DicResult(dic=dic, dic_saturated=dic + 2.0 * sat, p_eff=p_eff,
                     mean_deviance=d_bar, n_draws=n_draws)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def fit_gender(model: GenderModel, settings: InferenceSettings = InferenceSettings(),
               theta_init: HyperParams | None = None, with_dic: bool = True) -> FitResult:
    """Full fit for one gender: optimize theta, grid, summaries, DIC."""
    theta_mode, grid, diagnostics = optimize_theta(model, init=theta_init, settings=settings)
    result = posterior_summaries(model, grid, settings=settings)
    if with_dic:
        result.dic = compute_dic(model, theta_mode, settings=settings, approx=grid[0].approx)
    result.metadata.update(diagnostics)
    result.metadata["settings"] = asdict(settings)
    result.metadata["n_observations"] = model.n_obs
    result.metadata["n_constraints"] = model.constraints.n_constraints
    result.metadata["p_eff_negative"] = bool(result.dic and result.dic.p_eff < 0)
    return result
