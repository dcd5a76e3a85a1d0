"""Penalized-likelihood fitting and model assessment.

The maximizer is a scoring loop: the ascent direction is G^-1 U where U is
the finite-difference gradient of the penalized log-likelihood and G sums
the outer products of per-patient penalized score shares plus the prior
precision (a robust-variance curvature surrogate).  Convergence is declared
when U' G^-1 U / p -- the relative distance to the maximum, interpretable as
numerical over statistical error -- drops below a threshold (default 0.1).
At the optimum the posterior is approximated by a Gaussian centered at the
estimate with covariance from the inverse Hessian of minus the penalized
log-likelihood.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import covariates, likelihood
from .covariates import ModelSpec, ModelVariant, PopulationParams, RandomEffects
from .dynamics import DEFAULT_ATOL, DEFAULT_RTOL, Trajectory
from .errors import (
    LineSearchError,
    MaxIterationsError,
    NumericalError,
    SingularMatrixError,
    ValidationError,
)
from .likelihood import CohortEvaluator, PriorSpec

RIDGE_LADDER = tuple(10.0 ** -k for k in range(10, 5, -1))  # 1e-10 .. 1e-6

# Prior means shared by the published analyses (log scale), used as default
# initial intercepts when no preset is loaded.
STANDARD_INTERCEPT_PRIORS = {
    "log_production": (1.000, 1.000),
    "log_reversion": (0.000, 0.250),
    "log_proliferation": (-4.000, 1.000),
    "log_mortality_quiescent": (-3.600, 0.500),
    "log_mortality_proliferating": (-2.500, 0.500),
}


def standard_prior() -> PriorSpec:
    """Gaussian priors on the five intercepts, flat elsewhere."""
    return PriorSpec(
        {
            name: likelihood.GaussianPrior(mean, sd)
            for name, (mean, sd) in STANDARD_INTERCEPT_PRIORS.items()
        }
    )


@dataclass(frozen=True)
class OptimizerConfig:
    rdm_threshold: float = 0.1
    max_iterations: int = 100
    gradient_step: float = 1e-5
    hessian_step: float = 1e-4
    contraction: float = 0.5
    max_halvings: int = 30
    nodes: int = 9
    workers: int | None = None
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    # secondary stall stop (diagnostic criteria; RDM stays authoritative).
    # With n <= p patients the score outer-product curvature makes the RDM
    # identically ~n/p away from 0, so tiny cohorts can only stop here.
    stall_step_tol: float = 1e-6
    stall_loglik_tol: float = 1e-8
    allow_stall_stop: bool = True

    def __post_init__(self):
        if not self.rdm_threshold > 0:
            raise ValidationError("rdm_threshold must be > 0")
        if not 0 < self.contraction < 1:
            raise ValidationError("line-search contraction must be in (0, 1)")


@dataclass(frozen=True)
class FitResult:
    """Posterior mode with its normal approximation and fit criteria."""

    params: PopulationParams
    variant: ModelVariant
    theta: np.ndarray
    names: tuple[str, ...]
    covariance: np.ndarray
    loglik: float
    penalized_loglik: float
    lcva: float
    iterations: int
    final_rdm: float
    n_patients: int
    feedback_exponent: float = 0.0
    warnings: tuple[str, ...] = ()

    @property
    def sds(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))

    def natural_rows(self):
        """Per-parameter rows with estimation- and natural-scale mean/sd."""
        rows = []
        for j, name in enumerate(self.names):
            est, sd = float(self.theta[j]), float(self.sds[j])
            if name.startswith("log_"):
                nat = math.exp(est)
                rows.append((name, est, sd, nat, nat * sd))
            else:
                rows.append((name, est, sd, est, sd))
        return rows

    def to_report(self) -> dict:
        return {
            "model": self.variant.value,
            "feedback_exponent": self.feedback_exponent,
            "parameters": {
                name: {
                    "estimate": est,
                    "sd": sd,
                    "natural_estimate": nat,
                    "natural_sd": nat_sd,
                }
                for name, est, sd, nat, nat_sd in self.natural_rows()
            },
            "loglik": self.loglik,
            "penalized_loglik": self.penalized_loglik,
            "lcva": self.lcva,
            "iterations": self.iterations,
            "final_rdm": self.final_rdm,
            "n_patients": self.n_patients,
            "warnings": list(self.warnings),
        }


# ---------------------------------------------------------------------------
# objective protocol


class Objective:
    """Penalized objective over per-unit log-likelihood contributions.

    Subclasses define per_patient_loglik(theta) plus the prior terms; the
    scoring loop only touches this interface, so test problems with analytic
    likelihoods can run through the identical optimizer.
    """

    n_patients: int
    names: tuple[str, ...]

    def per_patient_loglik(self, theta, refresh=True) -> np.ndarray:
        """Per-unit log-likelihoods; refresh=False may reuse evaluation
        state cached at the most recent refreshed point (finite-difference
        perturbations only)."""
        raise NotImplementedError

    def prior_log_density(self, theta) -> float:
        return 0.0

    def prior_gradient(self, theta) -> np.ndarray:
        return np.zeros(len(self.names))

    def prior_precision(self, theta) -> np.ndarray:
        return np.zeros(len(self.names))

    def prior_curvature(self, theta) -> np.ndarray:
        return self.prior_precision(theta)

    def loglik(self, theta, refresh=True) -> float:
        return math.fsum(self.per_patient_loglik(theta, refresh))

    def penalized(self, theta, refresh=True) -> float:
        return self.loglik(theta, refresh) + self.prior_log_density(theta)

    def penalized_or_neginf(self, theta, refresh=True) -> float:
        """Robust evaluation for line searches: any undefined point is -inf."""
        try:
            value = self.penalized(theta, refresh)
        except (NumericalError, ValidationError):
            return -np.inf
        return value if np.isfinite(value) else -np.inf


class CohortObjective(Objective):
    """Marginal-likelihood objective for a patient cohort."""

    def __init__(self, evaluator: CohortEvaluator, spec: ModelSpec, prior: PriorSpec):
        self.evaluator = evaluator
        self.spec = spec
        self.prior = prior
        self.names = tuple(covariates.param_names(spec.variant))
        self.n_patients = len(evaluator.patients)

    def per_patient_loglik(self, theta, refresh=True):
        if not np.all(np.isfinite(theta)):
            raise NumericalError("non-finite parameter vector")
        pop = covariates.unpack(theta, self.spec.variant)
        return self.evaluator.per_patient(self.spec, pop, refresh)

    def prior_log_density(self, theta):
        return self.prior.log_density(theta, self.names)

    def prior_gradient(self, theta):
        return self.prior.gradient(theta, self.names)

    def prior_precision(self, theta):
        return self.prior.precision(theta, self.names)


# ---------------------------------------------------------------------------
# score, curvature, RDM


def _solve_spd(G, rhs):
    """Solve G x = rhs with an escalating ridge; (solution, ridge used).

    The ridge ladder 1e-10..1e-6 is relative to the mean diagonal of G so
    the repair is scale-free; exceeding it is a singularity error.
    """
    scale = float(np.mean(np.abs(np.diag(G))))
    if not np.isfinite(scale) or scale == 0.0:
        scale = 1.0
    for ridge in (0.0,) + RIDGE_LADDER:
        try:
            factor = cho_factor(G + ridge * scale * np.eye(len(G)), lower=True)
        except np.linalg.LinAlgError:
            continue
        if ridge > 0.0:
            warnings.warn(f"curvature matrix regularized with relative ridge {ridge:g}")
        return cho_solve(factor, rhs), ridge
    raise SingularMatrixError(
        "curvature matrix singular even after ridge regularization up to 1e-6"
    )


def _score_matrix(objective, theta, step):
    """Per-patient finite-difference scores, shape (n, p)."""
    p = len(theta)
    scores = np.empty((objective.n_patients, p))
    for j in range(p):
        h = step * max(1.0, abs(theta[j]))
        up = np.array(theta)
        up[j] += h
        down = np.array(theta)
        down[j] -= h
        try:
            fu = objective.per_patient_loglik(up, refresh=False)
            fd = objective.per_patient_loglik(down, refresh=False)
        except NumericalError as exc:
            raise NumericalError(
                f"score evaluation failed on coordinate {objective.names[j]}: {exc}"
            ) from exc
        scores[:, j] = (fu - fd) / (2.0 * h)
    if not np.all(np.isfinite(scores)):
        bad = [objective.names[j] for j in np.nonzero(~np.isfinite(scores).all(axis=0))[0]]
        raise NumericalError(f"non-finite score entries for coordinates {bad}")
    return scores


def _score_and_curvature(objective, theta, step):
    scores = _score_matrix(objective, theta, step)
    prior_grad = objective.prior_gradient(theta)
    score = scores.sum(axis=0) + prior_grad
    shares = scores + prior_grad[None, :] / objective.n_patients
    curvature = shares.T @ shares + np.diag(objective.prior_precision(theta))
    return score, curvature


def score_and_curvature(cohort, spec, pop, prior, config=None):
    """Penalized score U and robust curvature G = sum_i s_i s_i' + prior precision."""
    config = config or OptimizerConfig()
    pop.validate_for(spec.variant)
    theta = covariates.pack(pop, spec.variant)
    with CohortEvaluator(cohort, config.nodes, config.workers, config.rtol, config.atol) as ev:
        objective = CohortObjective(ev, spec, prior)
        objective.per_patient_loglik(theta)  # center the per-patient quadratures
        return _score_and_curvature(objective, theta, config.gradient_step)


def rdm(score, curvature, n_params) -> float:
    """Relative distance to maximum: U' G^-1 U / p."""
    score = np.asarray(score, dtype=float)
    solution, _ = _solve_spd(np.asarray(curvature, dtype=float), score)
    return float(score @ solution) / n_params


# ---------------------------------------------------------------------------
# the scoring loop


@dataclass
class MaximizeResult:
    theta: np.ndarray
    iterations: int
    final_rdm: float
    penalized_loglik: float
    converged_by: str = "rdm"
    trace: list = field(default_factory=list)


def maximize_penalized(objective, theta0, config=None) -> MaximizeResult:
    """Scoring ascent with backtracking, stopped by the RDM criterion.

    A secondary stall stop (parameter displacement and objective change both
    below tolerance) terminates fits whose RDM cannot reach the threshold;
    the result records converged_by = "stall" in that case.
    """
    config = config or OptimizerConfig()
    theta = np.asarray(theta0, dtype=float).copy()
    p = len(theta)
    penalized = objective.penalized_or_neginf(theta)
    if not np.isfinite(penalized):
        raise ValidationError("initial parameters give a non-finite penalized log-likelihood")
    trace = []
    damping = 0.0  # Levenberg-style safeguard for the far-from-optimum phase
    for iteration in range(config.max_iterations + 1):
        score, curvature = _score_and_curvature(objective, theta, config.gradient_step)
        value = rdm(score, curvature, p)
        trace.append({"iteration": iteration, "penalized_loglik": penalized, "rdm": value})
        if value < config.rdm_threshold:
            return MaximizeResult(theta, iteration, value, penalized, "rdm", trace)
        if iteration == config.max_iterations:
            break
        scale = float(np.mean(np.abs(np.diag(curvature)))) or 1.0
        direction, _ = _solve_spd(curvature + damping * scale * np.eye(p), score)
        # near-null curvature directions can produce absurd steps when the
        # cohort is small; cap the norm, backtracking handles the rest
        norm = float(np.linalg.norm(direction))
        cap = 10.0 * max(1.0, float(np.linalg.norm(theta)))
        if norm > cap:
            direction = direction * (cap / norm)
        alpha = 1.0
        for _ in range(config.max_halvings + 1):
            candidate = theta + alpha * direction
            cand_penalized = objective.penalized_or_neginf(candidate)
            if cand_penalized > penalized:
                displacement = float(np.max(np.abs(candidate - theta)))
                gain = cand_penalized - penalized
                theta, penalized = candidate, cand_penalized
                if alpha == 1.0:
                    damping = damping / 4.0 if damping > 1e-8 else 0.0
                elif alpha < 0.25:
                    damping = max(4.0 * damping, 1e-4)
                if (
                    config.allow_stall_stop
                    and displacement < config.stall_step_tol
                    and gain < config.stall_loglik_tol
                ):
                    return MaximizeResult(theta, iteration + 1, value, penalized, "stall", trace)
                break
            alpha *= config.contraction
        else:
            raise LineSearchError(
                "no ascent along the scoring direction",
                diagnostics={"theta": theta, "score": score, "rdm": value, "trace": trace},
            )
    raise MaxIterationsError(
        f"RDM stayed >= {config.rdm_threshold} after {config.max_iterations} iterations",
        diagnostics={"theta": theta, "rdm": trace[-1]["rdm"], "trace": trace},
    )


# ---------------------------------------------------------------------------
# Hessians, covariance, LCVa


def _fd_hessian(f, x, rel_step):
    """Symmetric central-difference Hessian plus the center value."""
    x = np.asarray(x, dtype=float)
    p = len(x)
    h = rel_step * np.maximum(1.0, np.abs(x))
    f0 = f(x)
    H = np.empty((p, p))

    def at(i, si, j=None, sj=0):
        y = x.copy()
        y[i] += si * h[i]
        if j is not None:
            y[j] += sj * h[j]
        return f(y)

    for i in range(p):
        H[i, i] = (at(i, 1) - 2.0 * f0 + at(i, -1)) / h[i] ** 2
    for i in range(p):
        for j in range(i + 1, p):
            mixed = (
                at(i, 1, j, 1) - at(i, 1, j, -1) - at(i, -1, j, 1) + at(i, -1, j, -1)
            ) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = mixed
    return H, f0


def _invert_spd(H):
    """Inverse of a matrix expected to be SPD; ridge-repairs and reports."""
    notes = []
    scale = float(np.mean(np.abs(np.diag(H)))) or 1.0
    for k in (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2):
        try:
            factor = cho_factor(H + k * scale * np.eye(len(H)), lower=True)
        except np.linalg.LinAlgError:
            continue
        if k > 0.0:
            notes.append(f"hessian not positive definite; repaired with ridge {k:g}*scale")
        cov = cho_solve(factor, np.eye(len(H)))
        return 0.5 * (cov + cov.T), notes
    raise SingularMatrixError("hessian could not be repaired to positive definite")


def _criteria_at(objective, theta, config):
    """(loglik, H_L, H_LP, covariance, lcva, notes) at a parameter point."""
    objective.per_patient_loglik(theta)  # center the per-patient quadratures
    minus_hess, loglik_hat = _fd_hessian(
        lambda th: objective.loglik(th, refresh=False), theta, config.hessian_step
    )
    hess_loglik = -minus_hess  # Hessian of minus the log-likelihood
    hess_penalized = hess_loglik + np.diag(objective.prior_curvature(theta))
    covariance, notes = _invert_spd(hess_penalized)
    trace_term = float(np.trace(covariance @ hess_loglik))
    lcva_value = -(loglik_hat - trace_term) / objective.n_patients
    return loglik_hat, hess_loglik, hess_penalized, covariance, lcva_value, notes


def fit(cohort, spec, prior, init, config=None) -> FitResult:
    """MAP fit of the population parameters for one covariate model."""
    config = config or OptimizerConfig()
    init.validate_for(spec.variant)
    theta0 = covariates.pack(init, spec.variant)
    with CohortEvaluator(cohort, config.nodes, config.workers, config.rtol, config.atol) as ev:
        objective = CohortObjective(ev, spec, prior)
        result = maximize_penalized(objective, theta0, config)
        loglik_hat, _, _, covariance, lcva_value, notes = _criteria_at(
            objective, result.theta, config
        )
        if result.converged_by != "rdm":
            notes = list(notes) + [
                f"stopped on parameter/objective stall with rdm {result.final_rdm:.3g} "
                f">= threshold {config.rdm_threshold:g}"
            ]
    return FitResult(
        params=covariates.unpack(result.theta, spec.variant),
        variant=spec.variant,
        theta=result.theta,
        names=tuple(covariates.param_names(spec.variant)),
        covariance=covariance,
        loglik=loglik_hat,
        penalized_loglik=result.penalized_loglik,
        lcva=lcva_value,
        iterations=result.iterations,
        final_rdm=result.final_rdm,
        n_patients=len(ev.patients),
        feedback_exponent=spec.feedback_exponent,
        warnings=tuple(notes),
    )


def lcva(cohort, spec, fitted, prior, config=None) -> float:
    """Approximate cross-validation criterion; smaller is better."""
    config = config or OptimizerConfig()
    if isinstance(fitted, FitResult):
        theta = fitted.theta
    else:
        theta = covariates.pack(fitted, spec.variant)
    with CohortEvaluator(cohort, config.nodes, config.workers, config.rtol, config.atol) as ev:
        objective = CohortObjective(ev, spec, prior)
        return _criteria_at(objective, theta, config)[4]


# ---------------------------------------------------------------------------
# profile over the feedback exponent


@dataclass(frozen=True)
class ProfilePoint:
    exponent: float
    penalized_loglik: float | None
    fit: FitResult | None
    error: str | None = None


@dataclass(frozen=True)
class ProfileResult:
    best_exponent: float
    points: tuple[ProfilePoint, ...]


def profile_feedback(cohort, spec, prior, exponent_grid, init, config=None) -> ProfileResult:
    """Refit with the feedback exponent pinned at each grid value.

    Each successive grid point starts from the previous point's estimate.
    Grid-point failures are recorded, not fatal.
    """
    if len(exponent_grid) == 0:
        raise ValidationError("exponent grid is empty")
    config = config or OptimizerConfig()
    points = []
    start = init
    for nu in exponent_grid:
        spec_nu = replace(spec, feedback_exponent=float(nu))
        try:
            fitted = fit(cohort, spec_nu, prior, start, config)
        except (NumericalError, ValidationError) as exc:
            points.append(ProfilePoint(float(nu), None, None, str(exc)))
            continue
        points.append(ProfilePoint(float(nu), fitted.penalized_loglik, fitted))
        start = fitted.params
    successes = [pt for pt in points if pt.penalized_loglik is not None]
    if not successes:
        raise NumericalError("every grid point failed in the feedback profile")
    best = max(successes, key=lambda pt: pt.penalized_loglik)
    return ProfileResult(best.exponent, tuple(points))


# ---------------------------------------------------------------------------
# individual prediction


def empirical_bayes_mode(patient, spec, pop,
                         rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL) -> RandomEffects:
    """Mode of the conditional posterior of one patient's random effects."""
    pop.validate_for(spec.variant)
    if len(patient.observations) == 0:
        return RandomEffects(0.0, 0.0)
    mode, _, _ = likelihood._posterior_mode(
        patient, spec, pop, np.zeros(2), rtol, atol
    )
    return RandomEffects(float(mode[0]), float(mode[1]))


def predict_individual(patient, spec, pop, horizon, step=1.0,
                       rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL) -> Trajectory:
    """Empirical-Bayes fit of one patient, projected over [0, horizon] days."""
    u = empirical_bayes_mode(patient, spec, pop, rtol, atol)
    times = np.arange(0.0, float(horizon) + 0.5 * step, step)
    return likelihood.model_trajectory(patient.schedule, spec, pop, u, times, rtol, atol)


def default_init(spec, prior=None) -> PopulationParams:
    """Starting point: prior-mean intercepts, zero effects, 0.3 SDs."""
    prior = prior or standard_prior()
    means = {}
    for name, (default_mean, _) in STANDARD_INTERCEPT_PRIORS.items():
        entry = prior.entries.get(name)
        means[name] = entry.mean if entry is not None and math.isfinite(entry.sd) else default_mean
    n_boost = 1 if spec.variant is ModelVariant.BASIC else 3
    return PopulationParams(
        log_production=means["log_production"],
        log_reversion=means["log_reversion"],
        log_proliferation=means["log_proliferation"],
        log_mortality_quiescent=means["log_mortality_quiescent"],
        log_mortality_proliferating=means["log_mortality_proliferating"],
        proliferation_boosts=(0.0,) * n_boost,
        mortality_effect=0.0,
        repeat_cycle_effect=0.0 if spec.variant is ModelVariant.REPEATED_CYCLE else None,
        sd_production=0.3,
        sd_reversion=0.3,
        noise_cd4=0.3,
        noise_ki67=0.3,
    )
