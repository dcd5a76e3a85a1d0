"""Observation model and likelihoods on the fourth-root count scale.

CD4 observations measure quiescent + proliferating, Ki67 observations
measure proliferating alone; both are compared to the model on the
fourth-root scale with Gaussian measurement error.  The conditional
log-likelihood fixes a patient's random effects; the marginal integrates
them out with mode-recentered Gauss-Hermite quadrature (the quadrature grid
is shifted to the conditional-posterior mode and scaled by the inverse
square-root curvature there).
"""

from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

from . import covariates, dynamics
from .covariates import InjectionSchedule, ModelSpec, PopulationParams, RandomEffects
from .errors import (
    NonConvergenceError,
    NumericalError,
    PatientEvaluationError,
    QuadratureError,
    ValidationError,
)

LOG_2PI = math.log(2.0 * math.pi)
WORKER_ENV_VAR = "CD4DYN_WORKERS"


class ObservationKind(enum.Enum):
    CD4 = "CD4"
    KI67 = "KI67"


@dataclass(frozen=True)
class Observation:
    time: float
    kind: ObservationKind
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValidationError(f"observed count must be >= 0, got {self.value}")
        if not isinstance(self.kind, ObservationKind):
            object.__setattr__(self, "kind", ObservationKind(self.kind))


@dataclass(frozen=True)
class PatientRecord:
    id: str
    schedule: InjectionSchedule
    observations: tuple[Observation, ...]

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))


def fourth_root(value):
    """Observation transform: value ** 0.25."""
    if np.any(np.asarray(value) < 0):
        raise ValidationError("fourth root of a negative count is undefined")
    return np.asarray(value, dtype=float) ** 0.25


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class GaussianPrior:
    mean: float
    sd: float
    scale: str = "estimation"  # "natural" evaluates the density at exp(theta)

    def __post_init__(self):
        if not (self.sd > 0):
            raise ValidationError("prior sd must be > 0 (use math.inf for flat)")
        if self.scale not in ("estimation", "natural"):
            raise ValidationError(f"unknown prior scale {self.scale!r}")


@dataclass(frozen=True)
class PriorSpec:
    """Independent Gaussian priors keyed by estimation-parameter name.

    Missing or infinite-sd entries are flat and contribute exactly zero to
    the penalty and its derivatives.
    """

    entries: dict = field(default_factory=dict)

    @classmethod
    def flat(cls):
        return cls({})

    def _active(self, names):
        for j, name in enumerate(names):
            prior = self.entries.get(name)
            if prior is not None and math.isfinite(prior.sd):
                yield j, prior

    def log_density(self, theta, names) -> float:
        total = 0.0
        for j, prior in self._active(names):
            x = math.exp(theta[j]) if prior.scale == "natural" else theta[j]
            z = (x - prior.mean) / prior.sd
            total += -0.5 * z * z - math.log(prior.sd) - 0.5 * LOG_2PI
        return total

    def gradient(self, theta, names) -> np.ndarray:
        g = np.zeros(len(names))
        for j, prior in self._active(names):
            if prior.scale == "natural":
                v = math.exp(theta[j])
                g[j] = -(v - prior.mean) / prior.sd**2 * v
            else:
                g[j] = -(theta[j] - prior.mean) / prior.sd**2
        return g

    def curvature(self, theta, names) -> np.ndarray:
        """Diagonal contribution to the Hessian of minus the penalty."""
        c = np.zeros(len(names))
        for j, prior in self._active(names):
            if prior.scale == "natural":
                v = math.exp(theta[j])
                c[j] = v * (2.0 * v - prior.mean) / prior.sd**2
            else:
                c[j] = 1.0 / prior.sd**2
        return c

    def precision(self, theta, names) -> np.ndarray:
        return self.curvature(theta, names)


# ---------------------------------------------------------------------------
# model trajectories and the conditional log-likelihood


def _sorted_observations(patient):
    obs = sorted(
        patient.observations, key=lambda o: (o.time, o.kind.value, o.value)
    )
    times = np.array([o.time for o in obs])
    is_cd4 = np.array([o.kind is ObservationKind.CD4 for o in obs])
    values = np.array([o.value for o in obs])
    return times, is_cd4, values


def _anchor_time(schedule, times):
    if schedule.injection_times:
        return schedule.injection_times[0]
    return float(times[0]) if len(times) else 0.0


def _equilibrium_batch(pop, spec, lam, rho, invalid):
    """Pre-treatment equilibrium per batch element; (q, p, valid mask)."""
    pi0 = math.exp(pop.log_proliferation)
    mq0 = math.exp(pop.log_mortality_quiescent)
    mp = math.exp(pop.log_mortality_proliferating)
    nu = spec.feedback_exponent
    if nu == 0.0:
        denom = pi0 + mq0 - 2.0 * rho * pi0 / (rho + mp)
        valid = denom > 0
        if not np.all(valid):
            if invalid == "raise":
                raise dynamics.NoEquilibriumError(
                    "no positive equilibrium for some random-effect values"
                )
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(valid, lam / np.where(valid, denom, 1.0), np.nan)
        p = pi0 * q / (rho + mp)
        return q, p, valid
    q, p, valid = dynamics._feedback_equilibrium_arrays(lam, rho, pi0, mq0, mp, nu)
    if invalid == "raise" and not np.all(valid):
        raise NumericalError("feedback equilibrium failed for some random-effect values")
    return q, p, valid


def _batch_states(patient, spec, pop, lam, rho, times, invalid="raise",
                  rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL):
    """Model states at `times` (sorted) for batched (lam, rho); (K, T, 2) + valid."""
    q_eq, p_eq, valid = _equilibrium_batch(pop, spec, lam, rho, invalid)
    anchor = _anchor_time(patient.schedule, times)
    states = np.empty((len(lam), len(times), 2))
    states[:, :, 0] = q_eq[:, None]
    states[:, :, 1] = p_eq[:, None]
    after = times > anchor
    if np.any(after):
        program = covariates.compile_program(
            spec, pop, patient.schedule, anchor, float(times[-1])
        )
        init = np.stack([np.where(valid, q_eq, 1.0), np.where(valid, p_eq, 1.0)], axis=1)
        mp = math.exp(pop.log_mortality_proliferating)
        out = dynamics.propagate_program(
            program, lam, rho, mp, spec.feedback_exponent, init, times[after], rtol, atol
        )
        states[:, after, :] = out
    return states, valid


def _conditional_batch(patient, spec, pop, u_production, u_reversion,
                       invalid="raise", rtol=dynamics.DEFAULT_RTOL,
                       atol=dynamics.DEFAULT_ATOL):
    """Conditional log-likelihood for a batch of random-effect values; (K,)."""
    times, is_cd4, values = _sorted_observations(patient)
    if len(times) == 0:
        raise ValidationError(f"patient {patient.id!r} has no observations")
    u_production = np.asarray(u_production, dtype=float)
    u_reversion = np.asarray(u_reversion, dtype=float)
    with np.errstate(over="ignore"):
        lam = np.exp(pop.log_production + u_production)
        rho = np.exp(pop.log_reversion + u_reversion)
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(rho))):
        if invalid == "raise":
            raise NumericalError(f"rates overflow for patient {patient.id!r}")
        return np.full(len(lam), -np.inf)
    try:
        states, valid = _batch_states(
            patient, spec, pop, lam, rho, times, invalid, rtol, atol
        )
    except NumericalError:
        if invalid == "raise":
            raise
        return np.full(len(lam), -np.inf)
    model = np.where(is_cd4[None, :], states.sum(axis=2), states[:, :, 1])
    with np.errstate(invalid="ignore", over="ignore"):
        resid = values[None, :] ** 0.25 - np.maximum(model, 0.0) ** 0.25
        sigma = np.where(is_cd4, pop.noise_cd4, pop.noise_ki67)
        ll = -0.5 * np.sum((resid / sigma) ** 2 + np.log(sigma**2) + LOG_2PI, axis=1)
    ll = np.where(valid, ll, -np.inf)
    if invalid == "raise" and not np.all(np.isfinite(ll)):
        raise NumericalError(
            f"non-finite conditional log-likelihood for patient {patient.id!r}"
        )
    return ll


def conditional_loglik(patient, spec, pop, u=RandomEffects(),
                       rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL) -> float:
    """Log-likelihood of a patient's observations given fixed random effects."""
    pop.validate_for(spec.variant)
    ll = _conditional_batch(
        patient, spec, pop,
        np.array([u.production]), np.array([u.reversion]),
        invalid="raise", rtol=rtol, atol=atol,
    )
    return float(ll[0])


def model_trajectory(schedule, spec, pop, u, times,
                     rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL):
    """Deterministic model trajectory for one individual on `times`."""
    pop.validate_for(spec.variant)
    times = np.asarray(times, dtype=float)
    carrier = PatientRecord("_traj", schedule, ())
    lam = np.array([math.exp(pop.log_production + u.production)])
    rho = np.array([math.exp(pop.log_reversion + u.reversion)])
    states, _ = _batch_states(carrier, spec, pop, lam, rho, times, "raise", rtol, atol)
    return dynamics.Trajectory(
        times=times, quiescent=states[0, :, 0], proliferating=states[0, :, 1]
    )


# ---------------------------------------------------------------------------
# marginal likelihood by adaptive Gauss-Hermite quadrature


@lru_cache(maxsize=8)
def _hermite_grid(nodes):
    x, w = hermgauss(nodes)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    z = np.stack([xx.ravel(), yy.ravel()], axis=1)     # (nodes^2, 2)
    logw = np.add.outer(np.log(w), np.log(w)).ravel()
    return z, logw + np.sum(z**2, axis=1)


def _u_log_prior(u, pop):
    with np.errstate(over="ignore"):
        z1 = u[:, 0] / pop.sd_production
        z2 = u[:, 1] / pop.sd_reversion
        return (
            -0.5 * (z1**2 + z2**2)
            - math.log(pop.sd_production)
            - math.log(pop.sd_reversion)
            - LOG_2PI
        )


def _posterior_h(patient, spec, pop, u_batch, invalid, rtol, atol):
    """log [conditional likelihood * random-effect prior] at each u row.

    Under invalid="neginf" every undefined or non-finite value comes back
    as -inf so callers can treat bad regions as zero likelihood.
    """
    ll = _conditional_batch(
        patient, spec, pop, u_batch[:, 0], u_batch[:, 1], invalid, rtol, atol
    )
    h = ll + _u_log_prior(u_batch, pop)
    if invalid == "neginf":
        h = np.where(np.isnan(h), -np.inf, h)
    return h


_MODE_GRAD_TOL = 1e-8
_MODE_MAX_ITER = 100
_MODE_STEP_CAP = 50.0


def _stencil(d):
    return np.array(
        [[0, 0], [d, 0], [-d, 0], [0, d], [0, -d], [d, d], [d, -d], [-d, d], [-d, -d]]
    )


def _posterior_mode(patient, spec, pop, start, rtol, atol):
    """Mode of the conditional posterior of u, with the Hessian there.

    Newton iterations on a 9-point finite-difference stencil, with
    backtracking along the step; the stencil shrinks when backtracking
    stalls, and a stationary point within stencil resolution is accepted.
    Returns (mode, hessian, h_at_mode).
    """
    d = 1e-4
    u = np.asarray(start, dtype=float).copy()
    alphas = 0.5 ** np.arange(0, 13)
    sd2 = np.array([pop.sd_production**2, pop.sd_reversion**2])
    cap = np.minimum(10.0 * np.sqrt(sd2), _MODE_STEP_CAP)

    def h_at(batch):
        return _posterior_h(patient, spec, pop, batch, "neginf", rtol, atol)

    vals = h_at(u[None, :] + _stencil(d))
    if not np.isfinite(vals[0]):
        u = np.zeros(2)
        vals = h_at(u[None, :] + _stencil(d))
        if not np.isfinite(vals[0]):
            raise NonConvergenceError(
                f"conditional posterior undefined near u=0 for patient {patient.id!r}"
            )
    shrinks = 0
    for _ in range(_MODE_MAX_ITER):
        f0 = vals[0]
        g = np.array([(vals[1] - vals[2]) / (2 * d), (vals[3] - vals[4]) / (2 * d)])
        h11 = (vals[1] - 2 * f0 + vals[2]) / d**2
        h22 = (vals[3] - 2 * f0 + vals[4]) / d**2
        h12 = (vals[5] - vals[6] - vals[7] + vals[8]) / (4 * d**2)
        H = np.array([[h11, h12], [h12, h22]])
        if np.max(np.abs(g)) < _MODE_GRAD_TOL:
            return u, H, f0
        neg_def = h11 < 0 and (h11 * h22 - h12 * h12) > 0
        if neg_def:
            step = -np.linalg.solve(H, g)
        else:
            step = g * sd2  # prior-scaled ascent fallback far from the mode
        step = np.clip(step, -cap, cap)
        cands = u[None, :] + alphas[:, None] * step[None, :]
        cand_vals = h_at(cands)
        better = np.nonzero(cand_vals > f0)[0]
        if len(better) == 0:
            # no ascent along the step: resolve finer, then accept the
            # stationary point once the stencil cannot distinguish it
            if shrinks < 2:
                shrinks += 1
                d *= 0.1
                vals = h_at(u[None, :] + _stencil(d))
                continue
            return u, H, f0
        u = cands[better[0]]
        vals = h_at(u[None, :] + _stencil(d))
    raise NonConvergenceError(
        f"random-effect mode search did not converge for patient {patient.id!r}"
    )


def _marginal(patient, spec, pop, nodes, start, rtol, atol, mode_info=None):
    """(log marginal likelihood, mode, negative mode Hessian).

    mode_info, when given, is a previously computed (mode, neg_hessian)
    pair used as the quadrature center and scale without re-searching; any
    positive-definite recentering gives a valid quadrature, so this is used
    for the small parameter perturbations of finite differencing.
    """
    if nodes < 1:
        raise ValidationError("need at least one quadrature node per dimension")
    if not (pop.sd_production > 0 and pop.sd_reversion > 0):
        raise ValidationError("random-effect SDs must be > 0 for the marginal")
    if mode_info is None:
        mode, H, _h0 = _posterior_mode(patient, spec, pop, start, rtol, atol)
        neg_h = -H
    else:
        mode, neg_h = mode_info
    # 2x2 positive-definiteness check
    if not (neg_h[0, 0] > 0 and np.linalg.det(neg_h) > 0):
        raise QuadratureError(
            f"inner Hessian not negative definite for patient {patient.id!r}"
        )
    cov = np.linalg.inv(neg_h)
    B = np.linalg.cholesky(cov)
    z, logw = _hermite_grid(nodes)
    points = mode[None, :] + math.sqrt(2.0) * z @ B.T
    h_vals = _posterior_h(patient, spec, pop, points, "neginf", rtol, atol)
    log_det_b = float(np.sum(np.log(np.diag(B))))
    log_integral = logsumexp(logw + h_vals) + math.log(2.0) + log_det_b
    if not np.isfinite(log_integral):
        raise NumericalError(
            f"marginal likelihood non-finite for patient {patient.id!r}"
        )
    return float(log_integral), mode, neg_h


def marginal_loglik(patient, spec, pop, nodes=9, start_mode=None,
                    rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL) -> float:
    """Log of the patient's likelihood integrated over the random effects."""
    pop.validate_for(spec.variant)
    start = np.zeros(2) if start_mode is None else np.asarray(start_mode, dtype=float)
    value, _, _ = _marginal(patient, spec, pop, nodes, start, rtol, atol)
    return value


# ---------------------------------------------------------------------------
# cohort-level likelihoods


def worker_count(explicit=None) -> int:
    """Worker cap: explicit argument, else the CD4DYN_WORKERS env var, else 1."""
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get(WORKER_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"{WORKER_ENV_VAR} must be an integer, got {env!r}")
    return 1


def _eval_chunk(args):
    patients, spec, pop, nodes, starts, hessians, refresh, rtol, atol = args
    values = np.empty(len(patients))
    modes = np.empty((len(patients), 2))
    neg_hess = np.empty((len(patients), 2, 2))
    for i, patient in enumerate(patients):
        mode_info = None if refresh else (starts[i], hessians[i])
        try:
            value, mode, nh = _marginal(
                patient, spec, pop, nodes, starts[i], rtol, atol, mode_info
            )
        except (NumericalError, ValidationError) as exc:
            raise PatientEvaluationError(patient.id, str(exc)) from exc
        values[i] = value
        modes[i] = mode
        neg_hess[i] = nh
    return values, modes, neg_hess


class CohortEvaluator:
    """Evaluates per-patient marginal log-likelihoods for a fixed cohort.

    Keeps a per-patient warm start for the inner mode search and optionally a
    process pool; patients are always accumulated in sorted-id order so
    results do not depend on the execution schedule.
    """

    def __init__(self, cohort, nodes=9, workers=None,
                 rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL):
        if len(cohort) == 0:
            raise ValidationError("cohort is empty")
        self.patients = sorted(cohort, key=lambda r: str(r.id))
        for patient in self.patients:
            if len(patient.observations) == 0:
                raise ValidationError(f"patient {patient.id!r} has no observations")
        self.nodes = nodes
        self.rtol = rtol
        self.atol = atol
        self.workers = min(worker_count(workers), len(self.patients))
        n = len(self.patients)
        self._modes = np.zeros((n, 2))
        self._neg_hess = np.tile(np.eye(2), (n, 1, 1))
        self._refreshed = False
        self._pool = None

    def __enter__(self):
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
        return False

    def per_patient(self, spec, pop, refresh=True) -> np.ndarray:
        """Marginal log-likelihood per patient (sorted-id order).

        refresh=False reuses the stored per-patient quadrature centers and
        scales instead of re-searching the modes; valid for small parameter
        perturbations (finite differences) once a refreshed evaluation has
        populated them.
        """
        if not refresh and not self._refreshed:
            refresh = True
        n = len(self.patients)
        if self._pool is None:
            values, modes, neg_hess = _eval_chunk(
                (self.patients, spec, pop, self.nodes, self._modes, self._neg_hess,
                 refresh, self.rtol, self.atol)
            )
            if refresh:
                self._modes, self._neg_hess = modes, neg_hess
                self._refreshed = True
            return values
        chunks = [idx for idx in np.array_split(np.arange(n), self.workers) if len(idx)]
        args = [
            (
                [self.patients[i] for i in idx],
                spec,
                pop,
                self.nodes,
                self._modes[idx],
                self._neg_hess[idx],
                refresh,
                self.rtol,
                self.atol,
            )
            for idx in chunks
        ]
        values = np.empty(n)
        for idx, (vals, modes, neg_hess) in zip(chunks, self._pool.map(_eval_chunk, args)):
            values[idx] = vals
            if refresh:
                self._modes[idx] = modes
                self._neg_hess[idx] = neg_hess
        if refresh:
            self._refreshed = True
        return values

    def total(self, spec, pop, refresh=True) -> float:
        return math.fsum(self.per_patient(spec, pop, refresh))


def total_loglik(cohort, spec, pop, nodes=9, workers=None,
                 rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL) -> float:
    """Sum of marginal log-likelihoods, accumulated in patient-id order."""
    pop.validate_for(spec.variant)
    with CohortEvaluator(cohort, nodes, workers, rtol, atol) as ev:
        return ev.total(spec, pop)


def penalized_loglik(cohort, spec, pop, prior, nodes=9, workers=None,
                     rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL) -> float:
    """total_loglik plus the exact log prior density of the fixed effects."""
    names = covariates.param_names(spec.variant)
    theta = covariates.pack(pop, spec.variant)
    return total_loglik(cohort, spec, pop, nodes, workers, rtol, atol) + prior.log_density(
        theta, names
    )
