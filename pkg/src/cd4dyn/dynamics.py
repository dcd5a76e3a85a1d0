"""Two-compartment quiescent/proliferating CD4+ T-cell dynamics.

The state is (quiescent, proliferating) cell concentrations in cells/uL.
With rates (production, reversion, proliferation, mortality_quiescent,
mortality_proliferating) and optional crowding feedback with exponent nu,

    d(quiescent)/dt     = production + 2*reversion*P - proliferation*Q*w
                          - mortality_quiescent*Q
    d(proliferating)/dt = proliferation*Q*w - reversion*P
                          - mortality_proliferating*P

where w = (Q + P)**(-nu) and w = 1 for nu = 0.

For nu = 0 the system is affine-linear whenever the rates are constant in
time, and the propagation between rate discontinuities is computed in closed
form (the coefficient matrix always has two distinct real eigenvalues because
2*reversion*proliferation > 0).  Time-varying segments and nu > 0 fall back
to an embedded Dormand-Prince RK45 integrator that never steps across a
declared discontinuity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    FeedbackSingularityError,
    NegativeStateError,
    NoEquilibriumError,
    NonConvergenceError,
    StepSizeUnderflowError,
    ValidationError,
)

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10


@dataclass(frozen=True)
class CompartmentState:
    """Cell concentrations (cells/uL); total is the model-scale CD4 count."""

    quiescent: float
    proliferating: float

    def __post_init__(self):
        if self.quiescent < 0 or self.proliferating < 0:
            raise ValidationError(
                f"negative compartment state ({self.quiescent}, {self.proliferating})"
            )

    @property
    def total(self) -> float:
        return self.quiescent + self.proliferating

    def as_array(self) -> np.ndarray:
        return np.array([self.quiescent, self.proliferating], dtype=float)


@dataclass(frozen=True)
class BiologicalRates:
    """Natural-scale rate constants at one time instant; all strictly positive."""

    production: float             # cells/uL/day
    reversion: float              # 1/day
    proliferation: float          # 1/day
    mortality_quiescent: float    # 1/day
    mortality_proliferating: float  # 1/day

    def __post_init__(self):
        for name in (
            "production",
            "reversion",
            "proliferation",
            "mortality_quiescent",
            "mortality_proliferating",
        ):
            v = getattr(self, name)
            if not (v > 0) or not np.isfinite(v):
                raise ValidationError(f"rate {name} must be strictly positive, got {v}")


@dataclass(frozen=True)
class FeedbackSpec:
    """Crowding feedback exponent; 0 reproduces the feedback-free system exactly."""

    exponent: float = 0.0

    def __post_init__(self):
        if self.exponent < 0 or not np.isfinite(self.exponent):
            raise ValidationError(f"feedback exponent must be >= 0, got {self.exponent}")


NO_FEEDBACK = FeedbackSpec(0.0)


@dataclass(frozen=True)
class Trajectory:
    """States sampled on a fixed time grid (days)."""

    times: np.ndarray
    quiescent: np.ndarray
    proliferating: np.ndarray

    @property
    def cd4(self) -> np.ndarray:
        return self.quiescent + self.proliferating

    @property
    def ki67(self) -> np.ndarray:
        return self.proliferating

    def __len__(self):
        return len(self.times)

    def state(self, i: int) -> CompartmentState:
        return CompartmentState(float(self.quiescent[i]), float(self.proliferating[i]))


def derivatives(state, rates, feedback=NO_FEEDBACK):
    """Right-hand side of the system at one state. Returns (dQ/dt, dP/dt)."""
    q, p = state.quiescent, state.proliferating
    nu = feedback.exponent
    if nu > 0:
        total = q + p
        if total <= 0:
            raise FeedbackSingularityError(
                "feedback term undefined at zero total cell count"
            )
        w = total ** (-nu)
    else:
        w = 1.0
    influx = rates.proliferation * q * w
    dq = rates.production + 2.0 * rates.reversion * p - influx - rates.mortality_quiescent * q
    dp = influx - rates.reversion * p - rates.mortality_proliferating * p
    return dq, dp


# ---------------------------------------------------------------------------
# equilibrium


def _equilibrium_arrays(lam, rho, pi, mu_q, mu_p):
    """Closed-form nu=0 equilibrium for (broadcastable) rate arrays."""
    denom = pi + mu_q - 2.0 * rho * pi / (rho + mu_p)
    if np.any(denom <= 0):
        raise NoEquilibriumError(
            "no positive equilibrium: (proliferation + mortality_quiescent) * "
            "(reversion + mortality_proliferating) must exceed "
            "2 * reversion * proliferation"
        )
    q = lam / denom
    p = pi * q / (rho + mu_p)
    return q, p


def _feedback_equilibrium_arrays(lam, rho, pi, mu_q, mu_p, nu, max_iter=100):
    """Total-count fixed point for nu > 0, by safeguarded Newton.

    Reduces the 2-D equilibrium to the scalar root of
      g(T) = lam*(rho+mu_p) + lam*pi*T**(-nu) + (rho-mu_p)*pi*T**(1-nu)
             - mu_q*(rho+mu_p)*T
    then recovers (Q, P) from T.  Initialized at the nu=0 solution, with a
    per-element bisection rescue so one stubborn element never spoils the
    batch.  Returns (q, p, ok-mask).
    """
    lam, rho, pi, mu_q, mu_p = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (lam, rho, pi, mu_q, mu_p))
    )
    s = rho + mu_p

    def g(T):
        with np.errstate(over="ignore", invalid="ignore"):
            return (lam * s + lam * pi * T ** (-nu)
                    + (rho - mu_p) * pi * T ** (1.0 - nu) - mu_q * s * T)

    def gprime(T):
        with np.errstate(over="ignore", invalid="ignore"):
            return (
                -nu * lam * pi * T ** (-nu - 1.0)
                + (1.0 - nu) * (rho - mu_p) * pi * T ** (-nu)
                - mu_q * s
            )

    denom0 = pi + mu_q - 2.0 * rho * pi / s
    with np.errstate(divide="ignore", invalid="ignore"):
        T = np.where(denom0 > 0, lam / np.where(denom0 > 0, denom0, 1.0) * (1.0 + pi / s),
                     lam / mu_q)
    T = np.asarray(T, dtype=float).copy()
    for _ in range(max_iter):
        gv = g(T)
        step = gv / gprime(T)
        T_new = T - step
        # Newton can overshoot into T <= 0 when started far out; halve instead.
        bad = ~np.isfinite(T_new) | (T_new <= 0)
        T_new = np.where(bad, 0.5 * T, T_new)
        done = np.abs(T_new - T) <= 1e-12 * np.abs(T_new)
        T = T_new
        if np.all(done):
            break
    # accept on residual, not on the last step: Newton may oscillate by one
    # ulp around the root without ever taking a formally tiny step
    residual_scale = lam * s + mu_q * s * np.abs(T)
    ok = np.isfinite(T) & (np.abs(g(T)) <= 1e-9 * residual_scale)
    for idx in np.nonzero(~ok.ravel())[0]:
        root = _bisect_feedback_total(
            lam.ravel()[idx], rho.ravel()[idx], pi.ravel()[idx],
            mu_q.ravel()[idx], mu_p.ravel()[idx], nu,
        )
        if root is not None:
            T.ravel()[idx] = root
            ok.ravel()[idx] = True
    with np.errstate(over="ignore", invalid="ignore"):
        w = T ** (-nu)
        p = pi * w * T / (s + pi * w)
        q = T - p
    return q, p, ok


def _bisect_feedback_total(lam, rho, pi, mu_q, mu_p, nu, iters=200):
    s = rho + mu_p

    def g(T):
        return lam * s + lam * pi * T ** (-nu) + (rho - mu_p) * pi * T ** (1.0 - nu) - mu_q * s * T

    lo, hi = 1e-12, 1.0
    for _ in range(600):
        if g(hi) < 0:
            break
        hi *= 2.0
    else:
        return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def equilibrium(rates, feedback=NO_FEEDBACK):
    """Stationary state used as the pre-treatment initial condition."""
    if feedback.exponent == 0.0:
        q, p = _equilibrium_arrays(
            rates.production,
            rates.reversion,
            rates.proliferation,
            rates.mortality_quiescent,
            rates.mortality_proliferating,
        )
    else:
        q, p, ok = _feedback_equilibrium_arrays(
            rates.production,
            rates.reversion,
            rates.proliferation,
            rates.mortality_quiescent,
            rates.mortality_proliferating,
            feedback.exponent,
        )
        if not np.all(ok):
            raise NonConvergenceError("feedback equilibrium root find did not converge")
    state = CompartmentState(float(q), float(p))
    dq, dp = derivatives(state, rates, feedback)
    if max(abs(dq), abs(dp)) > 1e-8:
        raise NonConvergenceError(
            f"equilibrium residual too large: derivatives ({dq:.3e}, {dp:.3e})"
        )
    return state


# ---------------------------------------------------------------------------
# exact propagation of the constant-rate linear system
#
# y' = A y + f with A = [[a, b], [c, d]], f = [lam, 0],
# a = -(pi + mu_q), b = 2 rho, c = pi, d = -(rho + mu_p).
# e^(A s) = alpha(s) I + beta(s) A and int_0^s e^(A r) dr = gamma(s) I
# + delta(s) A, expressed through the two eigenvalues.  b*c > 0 guarantees
# two distinct real eigenvalues, so no defective branch is needed.


def _phi1(e, s):
    """(exp(e*s) - 1) / e, stable for small |e*s|; s may broadcast."""
    es = e * s
    small = np.abs(es) < 1e-12
    safe = np.where(small, 1.0, e)
    return np.where(small, s * (1.0 + 0.5 * es), np.expm1(es) / safe)


def _linear_states(a, b, c, d, lam, q0, p0, offsets):
    """Propagate the affine system from (q0, p0) to each offset.

    a, c: scalars; b, d, lam, q0, p0: arrays of shape (K,);
    offsets: array (S,) of nonnegative time offsets.
    Returns (q, p) arrays of shape (K, S).
    """
    b = np.asarray(b, dtype=float)[:, None]
    d = np.asarray(d, dtype=float)[:, None]
    lam = np.asarray(lam, dtype=float)[:, None]
    q0 = np.asarray(q0, dtype=float)[:, None]
    p0 = np.asarray(p0, dtype=float)[:, None]
    s = np.asarray(offsets, dtype=float)[None, :]

    tr = a + d
    disc = np.sqrt((a - d) ** 2 + 4.0 * b * c)
    e1 = 0.5 * (tr + disc)
    e2 = 0.5 * (tr - disc)

    with np.errstate(over="ignore", under="ignore"):
        E1 = np.exp(e1 * s)
        E2 = np.exp(e2 * s)
        f1 = _phi1(e1, s)
        f2 = _phi1(e2, s)

        beta = (E1 - E2) / disc
        alpha = (e1 * E2 - e2 * E1) / disc
        delta = (f1 - f2) / disc
        gamma = (e1 * f2 - e2 * f1) / disc

        aq = a * q0 + b * p0   # A @ y0
        ap = c * q0 + d * p0
        q = alpha * q0 + beta * aq + gamma * lam + delta * (a * lam)
        p = alpha * p0 + beta * ap + delta * (c * lam)
    return q, p


# ---------------------------------------------------------------------------
# batched embedded RK45 (Dormand-Prince) for time-varying or nonlinear segments

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)


def _rk45(rhs, t0, t1, y0, targets, rtol, atol, max_steps=200000):
    """Integrate y' = rhs(t, y) over [t0, t1], landing exactly on each target.

    y0: (K, 2); targets: sorted times in (t0, t1].  Returns states at the
    targets, shape (K, S, 2), plus the final state (K, 2).
    """
    y = np.array(y0, dtype=float)
    t = float(t0)
    span = t1 - t0
    out = np.empty((y.shape[0], len(targets), 2), dtype=float)
    next_target = 0
    h = min(max(span / 100.0, 1e-6), 1.0, span)
    hmin = max(1e-14, 1e-13 * max(1.0, abs(span)))
    snap = 1e-9 * max(1.0, abs(t1))
    k = [None] * 7
    k[0] = rhs(t, y)
    for _ in range(max_steps):
        if t >= t1 - snap:
            break
        # do not step across the next target or the segment end
        limit = targets[next_target] if next_target < len(targets) else t1
        h = min(h, limit - t, t1 - t)
        if h < hmin:
            raise StepSizeUnderflowError(f"step size underflow at t = {t:.6g}")
        ks = np.empty((7,) + y.shape, dtype=float)
        ks[0] = k[0]
        try:
            for i in range(1, 7):
                yi = y + h * np.tensordot(_DP_A[i], ks[:i], axes=(0, 0))
                ks[i] = rhs(t + _DP_C[i] * h, yi)
        except FeedbackSingularityError:
            # a trial stage left the admissible region: reject and shrink
            h *= 0.2
            if h < hmin:
                raise
            continue
        y5 = y + h * np.tensordot(_DP_B5, ks, axes=(0, 0))
        y4 = y + h * np.tensordot(_DP_B4, ks, axes=(0, 0))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = np.sqrt(np.mean(((y5 - y4) / scale) ** 2, axis=-1))  # per node
        err_norm = float(np.max(err))
        if err_norm <= 1.0:
            t = t + h
            y = y5
            k[0] = ks[6]  # FSAL
            while next_target < len(targets) and targets[next_target] <= t + snap:
                out[:, next_target, :] = y
                next_target += 1
        factor = 0.9 * (max(err_norm, 1e-10)) ** (-0.2)
        h = h * min(5.0, max(0.2, factor))
    else:
        raise NonConvergenceError("RK45 exceeded the step budget")
    while next_target < len(targets):
        out[:, next_target, :] = y
        next_target += 1
    return out, y


# Compiled twin of _rk45 for the nonlinear / time-varying segment kinds used
# by the rate programs below.  Scalar loops over the batch avoid the numpy
# small-array overhead that dominates the interpreted path.  Status codes:
# 0 ok, 1 step underflow, 2 step budget exceeded, 3 feedback singularity.


@_njit(cache=True)
def _rk45_program_kernel(lam, rho, mup, nu, pi_s, mq_const, is_ramp, log_mq,
                         effect, clock_end, ramp_len, t0, t1, y, targets, out,
                         rtol, atol, max_steps):  # pragma: no cover - exercised via wrapper
    K = y.shape[0]
    # Dormand-Prince tableau; the 7th stage doubles as the 5th-order solution
    A = np.zeros((7, 7))
    A[1, 0] = 0.2
    A[2, 0], A[2, 1] = 3.0 / 40.0, 9.0 / 40.0
    A[3, 0], A[3, 1], A[3, 2] = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
    A[4, 0], A[4, 1], A[4, 2], A[4, 3] = (19372.0 / 6561.0, -25360.0 / 2187.0,
                                          64448.0 / 6561.0, -212.0 / 729.0)
    A[5, 0], A[5, 1], A[5, 2], A[5, 3], A[5, 4] = (
        9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0)
    A[6, 0], A[6, 2], A[6, 3], A[6, 4], A[6, 5] = (
        35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0)
    C = np.array([0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0])
    E = np.array([35.0 / 384.0 - 5179.0 / 57600.0, 0.0,
                  500.0 / 1113.0 - 7571.0 / 16695.0, 125.0 / 192.0 - 393.0 / 640.0,
                  -2187.0 / 6784.0 + 92097.0 / 339200.0, 11.0 / 84.0 - 187.0 / 2100.0,
                  -1.0 / 40.0])

    span = t1 - t0
    t = t0
    h = min(max(span / 100.0, 1e-6), 1.0, span)
    hmin = max(1e-14, 1e-13 * max(1.0, abs(span)))
    snap = 1e-9 * max(1.0, abs(t1))
    n_targets = targets.shape[0]
    next_target = 0

    ks = np.empty((7, K, 2))
    ytmp = np.empty((K, 2))

    def _rhs(tt, state, kout):
        if is_ramp:
            mq = np.exp(log_mq + effect * (clock_end - tt) / ramp_len)
        else:
            mq = mq_const
        for i in range(K):
            q = state[i, 0]
            p = state[i, 1]
            if nu > 0.0:
                tot = q + p
                if tot <= 0.0:
                    return False
                w = tot ** (-nu)
            else:
                w = 1.0
            influx = pi_s * q * w
            kout[i, 0] = lam[i] + 2.0 * rho[i] * p - influx - mq * q
            kout[i, 1] = influx - rho[i] * p - mup * p
        return True

    if not _rhs(t, y, ks[0]):
        return 3
    for _step in range(max_steps):
        if t >= t1 - snap:
            break
        limit = targets[next_target] if next_target < n_targets else t1
        if limit - t < h:
            h = limit - t
        if t1 - t < h:
            h = t1 - t
        if h < hmin:
            return 1
        stage_ok = True
        for st in range(1, 7):
            for i in range(K):
                acc0 = 0.0
                acc1 = 0.0
                for m in range(st):
                    acc0 += A[st, m] * ks[m, i, 0]
                    acc1 += A[st, m] * ks[m, i, 1]
                ytmp[i, 0] = y[i, 0] + h * acc0
                ytmp[i, 1] = y[i, 1] + h * acc1
            if not _rhs(t + C[st] * h, ytmp, ks[st]):
                stage_ok = False
                break
        if not stage_ok:
            # a trial stage left the admissible region: reject and shrink
            h *= 0.2
            if h < hmin:
                return 3
            continue
        # ytmp now holds the 5th-order solution (stage-7 input)
        err_norm = 0.0
        for i in range(K):
            acc = 0.0
            for j in range(2):
                err = 0.0
                for m in range(7):
                    err += E[m] * ks[m, i, j]
                err *= h
                big = abs(y[i, j])
                if abs(ytmp[i, j]) > big:
                    big = abs(ytmp[i, j])
                scaled = err / (atol + rtol * big)
                acc += scaled * scaled
            node = np.sqrt(acc / 2.0)
            if node > err_norm:
                err_norm = node
        if err_norm <= 1.0:
            t = t + h
            for i in range(K):
                y[i, 0] = ytmp[i, 0]
                y[i, 1] = ytmp[i, 1]
                ks[0, i, 0] = ks[6, i, 0]
                ks[0, i, 1] = ks[6, i, 1]
            while next_target < n_targets and targets[next_target] <= t + snap:
                for i in range(K):
                    out[i, next_target, 0] = y[i, 0]
                    out[i, next_target, 1] = y[i, 1]
                next_target += 1
        base = err_norm if err_norm > 1e-10 else 1e-10
        factor = 0.9 * base ** (-0.2)
        if factor > 5.0:
            factor = 5.0
        elif factor < 0.2:
            factor = 0.2
        h = h * factor
    else:
        return 2
    while next_target < n_targets:
        for i in range(K):
            out[i, next_target, 0] = y[i, 0]
            out[i, next_target, 1] = y[i, 1]
        next_target += 1
    return 0


def _rk45_segment(seg, production, reversion, mortality_p, nu, y, targets, rtol, atol):
    """Integrate one program segment, preferring the compiled kernel."""
    if _HAVE_NUMBA:
        K = y.shape[0]
        out = np.empty((K, len(targets), 2))
        y_work = np.array(y, dtype=float)
        if seg.ramp is None:
            args = (False, 0.0, 0.0, 0.0, 1.0)
            mq_const = seg.mortality_q
        else:
            log_mq, effect, clock_start, plateau, ramp_end = seg.ramp
            args = (True, log_mq, effect, clock_start + ramp_end, ramp_end - plateau)
            mq_const = 0.0
        status = _rk45_program_kernel(
            np.asarray(production, dtype=float),
            np.asarray(reversion, dtype=float),
            float(mortality_p),
            float(nu),
            float(seg.proliferation),
            float(mq_const),
            args[0], args[1], args[2], args[3], args[4],
            float(seg.t_start), float(seg.t_end),
            y_work,
            np.asarray(targets, dtype=float),
            out,
            float(rtol), float(atol), 200000,
        )
        if status == 1:
            raise StepSizeUnderflowError(f"step size underflow near t = {seg.t_end:.6g}")
        if status == 2:
            raise NonConvergenceError("RK45 exceeded the step budget")
        if status == 3:
            raise FeedbackSingularityError(
                "feedback term hit zero total count during integration"
            )
        return out, y_work

    def rhs(t, state):
        q, p = state[:, 0], state[:, 1]
        mq = seg.mortality_q_at(t)
        if nu > 0:
            total = q + p
            if np.any(total <= 0):
                raise FeedbackSingularityError(
                    "feedback term hit zero total count during integration"
                )
            w = total ** (-nu)
        else:
            w = 1.0
        influx = seg.proliferation * q * w
        dq = production + 2.0 * reversion * p - influx - mq * q
        dp = influx - reversion * p - mortality_p * p
        return np.stack([dq, dp], axis=1)

    return _rk45(rhs, seg.t_start, seg.t_end, y, targets, rtol, atol)


# ---------------------------------------------------------------------------
# piecewise rate programs
#
# A program is a list of contiguous RateSegments covering [t_start, t_end].
# proliferation and mortality_quiescent are constant per segment except on
# "ramp" segments where mortality_quiescent = exp(log_mq + effect * f(t)) with
# f falling linearly from 1 to 0 between clock_start+plateau and
# clock_start+ramp_end.  production, reversion, mortality_proliferating are
# time-constant and supplied at propagation time (they carry the random
# effects, hence the batch dimension).


@dataclass(frozen=True)
class RateSegment:
    t_start: float
    t_end: float
    proliferation: float
    mortality_q: float | None = None              # constant segments
    ramp: tuple | None = None                      # (log_mq, effect, clock_start, plateau, ramp_end)

    def mortality_q_at(self, t):
        if self.ramp is None:
            return self.mortality_q
        log_mq, effect, clock_start, plateau, ramp_end = self.ramp
        f = (clock_start + ramp_end - t) / (ramp_end - plateau)
        return np.exp(log_mq + effect * f)


def propagate_program(
    segments,
    production,
    reversion,
    mortality_p,
    feedback_exponent,
    init,
    times,
    rtol=DEFAULT_RTOL,
    atol=DEFAULT_ATOL,
):
    """States at `times` for a batch of (production, reversion) values.

    init: (K, 2) initial states at segments[0].t_start; times: sorted array
    within [t_start, t_end].  Returns (K, len(times), 2).
    """
    production = np.asarray(production, dtype=float)
    reversion = np.asarray(reversion, dtype=float)
    K = production.shape[0]
    times = np.asarray(times, dtype=float)
    out = np.empty((K, len(times), 2), dtype=float)
    y = np.array(init, dtype=float)
    t_cur = segments[0].t_start
    out[:, times <= t_cur, :] = y[:, None, :]
    d_coef = -(reversion + mortality_p)
    for seg in segments:
        width = seg.t_end - seg.t_start
        if width <= 0:
            continue
        inside = (times > seg.t_start + 1e-12) & (times <= seg.t_end)
        targets = times[inside]
        if seg.ramp is None and feedback_exponent == 0.0:
            offsets = np.append(targets - seg.t_start, width)
            q, p = _linear_states(
                -(seg.proliferation + seg.mortality_q),
                2.0 * reversion,
                seg.proliferation,
                d_coef,
                production,
                y[:, 0],
                y[:, 1],
                offsets,
            )
            if len(targets):
                out[:, inside, 0] = q[:, :-1]
                out[:, inside, 1] = p[:, :-1]
            y = np.stack([q[:, -1], p[:, -1]], axis=1)
        else:
            states, y = _rk45_segment(
                seg, production, reversion, mortality_p, feedback_exponent,
                y, targets, rtol, atol,
            )
            out[:, inside, :] = states
        negative = y < 0
        if np.any(negative):
            tol = 100.0 * (atol + rtol * np.abs(y).sum(axis=1, keepdims=True))
            if np.any(y < -tol):
                raise NegativeStateError(
                    f"state left the positive orthant at t = {seg.t_end:.6g}"
                )
            y = np.maximum(y, 0.0)
    return out


# ---------------------------------------------------------------------------
# public integrate() over a caller-supplied rates function


def _probe_constant(rates_at, t0, t1):
    """True if the five rates agree at three interior probe points."""
    probes = [t0 + f * (t1 - t0) for f in (0.21, 0.5, 0.79)]
    vals = [rates_at(t) for t in probes]
    first = vals[0]
    for v in vals[1:]:
        if (
            v.production != first.production
            or v.reversion != first.reversion
            or v.proliferation != first.proliferation
            or v.mortality_quiescent != first.mortality_quiescent
            or v.mortality_proliferating != first.mortality_proliferating
        ):
            return None
    return first


def integrate(
    rates_at,
    feedback,
    init,
    grid,
    breakpoints=(),
    rtol=DEFAULT_RTOL,
    atol=DEFAULT_ATOL,
    assume_piecewise_constant=None,
):
    """Integrate the system over `grid`, restarting at every breakpoint.

    rates_at: callable time -> BiologicalRates; it must be smooth between
    consecutive breakpoints (the rates produced by the covariate models are
    constant there except for the mortality ramp).  grid must be strictly
    increasing; breakpoints lists every discontinuity of rates_at inside the
    grid span.  assume_piecewise_constant: True forces the exact linear
    propagator on every segment, False forces RK45, None (default) probes
    each segment and uses the exact path only when the probes agree.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValidationError("grid must be a nonempty 1-D array")
    if len(grid) > 1 and np.any(np.diff(grid) <= 0):
        raise ValidationError("grid must be strictly increasing")
    t0, t_end = float(grid[0]), float(grid[-1])
    knots = [t0] + sorted({float(b) for b in breakpoints if t0 < b < t_end}) + [t_end]

    quiescent = np.empty(len(grid))
    proliferating = np.empty(len(grid))
    quiescent[0] = init.quiescent
    proliferating[0] = init.proliferating
    y = init.as_array()[None, :]
    nu = feedback.exponent

    for left, right in zip(knots[:-1], knots[1:]):
        inside = (grid > left + 1e-12) & (grid <= right)
        targets = grid[inside]
        const = None
        if assume_piecewise_constant is True:
            const = rates_at(left + 0.5 * (right - left))
        elif assume_piecewise_constant is None:
            const = _probe_constant(rates_at, left, right)
        if const is not None and nu == 0.0:
            seg = RateSegment(
                left,
                right,
                const.proliferation,
                mortality_q=const.mortality_quiescent,
            )
            states = propagate_program(
                [seg],
                np.array([const.production]),
                np.array([const.reversion]),
                const.mortality_proliferating,
                0.0,
                y,
                np.concatenate([targets, [right]]),
                rtol,
                atol,
            )
            if len(targets):
                quiescent[inside] = states[0, :-1, 0]
                proliferating[inside] = states[0, :-1, 1]
            y = states[:, -1, :]
        else:

            def rhs(t, state):
                r = rates_at(t)
                q, p = state[:, 0], state[:, 1]
                if nu > 0:
                    total = q + p
                    if np.any(total <= 0):
                        raise FeedbackSingularityError(
                            "feedback term hit zero total count during integration"
                        )
                    w = total ** (-nu)
                else:
                    w = 1.0
                influx = r.proliferation * q * w
                dq = r.production + 2.0 * r.reversion * p - influx - r.mortality_quiescent * q
                dp = influx - r.reversion * p - r.mortality_proliferating * p
                return np.stack([dq, dp], axis=1)

            states, y = _rk45(rhs, left, right, y, targets, rtol, atol)
            if len(targets):
                quiescent[inside] = states[0, :, 0]
                proliferating[inside] = states[0, :, 1]
        tol = 100.0 * (atol + rtol * np.abs(y).sum())
        if np.any(y < -tol):
            raise NegativeStateError(f"state left the positive orthant near t = {right:.6g}")
        y = np.maximum(y, 0.0)

    return Trajectory(times=grid, quiescent=quiescent, proliferating=proliferating)
