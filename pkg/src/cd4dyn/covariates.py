"""Statistical covariate models mapping injections to time-varying rates.

Three model variants share one structure: the five rate intercepts live on
log scale; random effects shift log production and log reversion; injections
raise the proliferation rate inside a 7-day window after each injection and
lower quiescent-cell mortality from 2 days after each cycle start, on a
plateau-then-ramp profile (full effect for ~a year, linear fade over the
next).  The dose enters through (dose / 10)**0.25 -- doses are expressed in
units of 10 ug/kg before the fourth root, which is the only convention that
reproduces the published natural-scale rates.

Variants:
  BASIC          one shared injection effect on proliferation.
  PER_INJECTION  a separate effect for the 1st, 2nd and 3rd injection of a
                 cycle.
  REPEATED_CYCLE per-injection effects plus an additive attenuation applied
                 inside windows of every cycle after the first.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import BiologicalRates, FeedbackSpec, RateSegment
from .errors import ValidationError

WEEK = 7.0
MAX_INJECTIONS_PER_CYCLE = 3


class ModelVariant(enum.Enum):
    BASIC = "basic"
    PER_INJECTION = "per-injection"
    REPEATED_CYCLE = "repeated-cycle"


@dataclass(frozen=True)
class InjectionSchedule:
    """Weekly injections grouped into cycles of at most three.

    injection_times: sorted days; cycle_starts: the first injection of each
    cycle (subset of injection_times); dose in ug/kg, shared by all
    injections of the schedule.
    """

    injection_times: tuple[float, ...]
    cycle_starts: tuple[float, ...]
    dose: float

    def __post_init__(self):
        if not (self.dose > 0):
            raise ValidationError(f"dose must be > 0, got {self.dose}")
        times = self.injection_times
        starts = self.cycle_starts
        if list(times) != sorted(set(times)):
            raise ValidationError("injection times must be strictly increasing")
        if list(starts) != sorted(set(starts)):
            raise ValidationError("cycle starts must be strictly increasing")
        if not set(starts) <= set(times):
            raise ValidationError("every cycle start must be an injection time")
        if times and not starts:
            raise ValidationError("injections present but no cycle starts")
        # partition injections into cycles and check weekly spacing and size
        for t in times:
            i = bisect.bisect_right(starts, t) - 1
            if i < 0:
                raise ValidationError(f"injection at day {t} precedes every cycle start")
            k = (t - starts[i]) / WEEK
            if abs(k - round(k)) > 1e-9 or round(k) >= MAX_INJECTIONS_PER_CYCLE:
                raise ValidationError(
                    f"injection at day {t} is not a weekly slot of cycle starting {starts[i]}"
                )
        for i, cs in enumerate(starts):
            end = starts[i + 1] if i + 1 < len(starts) else math.inf
            members = [t for t in times if cs <= t < end]
            slots = [round((t - cs) / WEEK) for t in members]
            if slots != list(range(len(members))):
                raise ValidationError(
                    f"cycle starting {cs} has non-consecutive weekly injections"
                )

    @classmethod
    def from_cycles(cls, cycle_starts, injections_per_cycle, dose):
        """Build a schedule from cycle start days and per-cycle counts."""
        starts = [float(s) for s in cycle_starts]
        if isinstance(injections_per_cycle, int):
            counts = [injections_per_cycle] * len(starts)
        else:
            counts = [int(c) for c in injections_per_cycle]
        if len(counts) != len(starts):
            raise ValidationError("one injection count per cycle required")
        times = []
        for s, c in zip(starts, counts):
            if not 1 <= c <= MAX_INJECTIONS_PER_CYCLE:
                raise ValidationError(f"injections per cycle must be 1..3, got {c}")
            times.extend(s + WEEK * k for k in range(c))
        return cls(tuple(times), tuple(starts), float(dose))

    @classmethod
    def empty(cls, dose=20.0):
        return cls((), (), dose)

    @property
    def n_injections(self) -> int:
        return len(self.injection_times)

    @property
    def n_cycles(self) -> int:
        return len(self.cycle_starts)

    def last_cycle_start(self, t):
        """Most recent cycle start at or before t, or None."""
        i = bisect.bisect_right(self.cycle_starts, t) - 1
        return self.cycle_starts[i] if i >= 0 else None

    def cycle_count_at(self, t) -> int:
        """Number of cycles begun at or before t."""
        return bisect.bisect_right(self.cycle_starts, t)

    def rank_of(self, injection_time) -> int:
        """1-based position of an injection within its cycle."""
        cs = self.last_cycle_start(injection_time)
        return int(round((injection_time - cs) / WEEK)) + 1


@dataclass(frozen=True)
class RandomEffects:
    """Per-patient log-scale offsets on production and reversion."""

    production: float = 0.0
    reversion: float = 0.0

    @classmethod
    def from_natural(cls, production_rate, reversion_rate, params):
        """Offsets that realize the given natural-scale individual rates."""
        return cls(
            math.log(production_rate) - params.log_production,
            math.log(reversion_rate) - params.log_reversion,
        )


@dataclass(frozen=True)
class PopulationParams:
    """Fixed effects, random-effect SDs and measurement-noise SDs.

    Intercepts are log-scale.  proliferation_boosts holds 1 (BASIC) or 3
    (other variants) injection effects; repeat_cycle_effect is used by
    REPEATED_CYCLE only.  Noise SDs act on the fourth-root observation scale.
    """

    log_production: float
    log_reversion: float
    log_proliferation: float
    log_mortality_quiescent: float
    log_mortality_proliferating: float
    proliferation_boosts: tuple[float, ...]
    mortality_effect: float
    repeat_cycle_effect: float | None = None
    sd_production: float = 0.3
    sd_reversion: float = 0.3
    noise_cd4: float = 0.3
    noise_ki67: float = 0.3

    def __post_init__(self):
        object.__setattr__(
            self, "proliferation_boosts", tuple(float(b) for b in self.proliferation_boosts)
        )
        if len(self.proliferation_boosts) not in (1, 3):
            raise ValidationError("proliferation_boosts must hold 1 or 3 coefficients")
        if self.sd_production < 0 or self.sd_reversion < 0:
            raise ValidationError("random-effect SDs must be >= 0")
        if not (self.noise_cd4 > 0 and self.noise_ki67 > 0):
            raise ValidationError("measurement SDs must be > 0")
        values = [
            self.log_production, self.log_reversion, self.log_proliferation,
            self.log_mortality_quiescent, self.log_mortality_proliferating,
            *self.proliferation_boosts, self.mortality_effect,
            self.sd_production, self.sd_reversion, self.noise_cd4, self.noise_ki67,
        ]
        if self.repeat_cycle_effect is not None:
            values.append(self.repeat_cycle_effect)
        if not all(math.isfinite(v) for v in values):
            raise ValidationError("population parameters must be finite")

    def validate_for(self, variant: ModelVariant):
        n = len(self.proliferation_boosts)
        if variant is ModelVariant.BASIC and n != 1:
            raise ValidationError("BASIC expects a single proliferation boost")
        if variant is not ModelVariant.BASIC and n != 3:
            raise ValidationError(f"{variant.value} expects three proliferation boosts")
        if variant is ModelVariant.REPEATED_CYCLE and self.repeat_cycle_effect is None:
            raise ValidationError("REPEATED_CYCLE requires repeat_cycle_effect")
        if variant is not ModelVariant.REPEATED_CYCLE and self.repeat_cycle_effect is not None:
            raise ValidationError(f"{variant.value} does not use repeat_cycle_effect")

    def baseline_rates(self, u: RandomEffects = RandomEffects()) -> BiologicalRates:
        """Rates with no injection effect (the pre-treatment state)."""
        return BiologicalRates(
            production=math.exp(self.log_production + u.production),
            reversion=math.exp(self.log_reversion + u.reversion),
            proliferation=math.exp(self.log_proliferation),
            mortality_quiescent=math.exp(self.log_mortality_quiescent),
            mortality_proliferating=math.exp(self.log_mortality_proliferating),
        )


@dataclass(frozen=True)
class ModelSpec:
    """Variant choice plus the effect-timing constants (days)."""

    variant: ModelVariant
    feedback_exponent: float = 0.0
    effect_window: float = WEEK
    mortality_onset: float = 2.0
    ramp_plateau: float = 360.0
    ramp_end: float = 720.0

    def __post_init__(self):
        if self.effect_window <= 0:
            raise ValidationError("effect_window must be > 0")
        if not self.mortality_onset < self.ramp_plateau < self.ramp_end:
            raise ValidationError("need mortality_onset < ramp_plateau < ramp_end")
        if self.feedback_exponent < 0:
            raise ValidationError("feedback_exponent must be >= 0")

    @property
    def feedback(self) -> FeedbackSpec:
        return FeedbackSpec(self.feedback_exponent)


def dose_covariate(dose) -> float:
    """Fourth root of the dose in 10 ug/kg units."""
    if not dose > 0:
        raise ValidationError(f"dose must be > 0, got {dose}")
    return float((dose / 10.0) ** 0.25)


def injection_rank(schedule: InjectionSchedule, t, window=WEEK):
    """Rank (1..3) of the single injection active at time t, else None.

    An injection at s is active on [s, s + window); equivalently we look for
    exactly one injection inside (t - window, t].
    """
    times = schedule.injection_times
    lo = bisect.bisect_right(times, t - window)
    hi = bisect.bisect_right(times, t)
    if hi - lo != 1:
        return None
    return schedule.rank_of(times[lo])


def survival_ramp(t_since_cycle_start, spec: ModelSpec) -> float:
    """Time profile of the mortality effect, measured from a cycle start."""
    t = t_since_cycle_start
    if t < 0:
        raise ValidationError("time since cycle start must be >= 0")
    if t <= spec.mortality_onset or t > spec.ramp_end:
        return 0.0
    if t <= spec.ramp_plateau:
        return 1.0
    return 1.0 - (t - spec.ramp_plateau) / (spec.ramp_end - spec.ramp_plateau)


def _proliferation_effect(schedule, spec, pop, t):
    """Log-additive injection effect on proliferation at time t (0 outside windows)."""
    rank = injection_rank(schedule, t, spec.effect_window)
    if rank is None:
        return 0.0
    dc = dose_covariate(schedule.dose)
    boosts = pop.proliferation_boosts
    if spec.variant is ModelVariant.BASIC:
        effect = boosts[0] * dc
    else:
        effect = boosts[rank - 1] * dc
        if spec.variant is ModelVariant.REPEATED_CYCLE and schedule.cycle_count_at(t) > 1:
            effect += pop.repeat_cycle_effect
    return effect


def _mortality_ramp_value(schedule, spec, t):
    cs = schedule.last_cycle_start(t)
    if cs is None:
        return 0.0
    return survival_ramp(t - cs, spec)


def rates_at(t, spec: ModelSpec, pop: PopulationParams, u: RandomEffects,
             schedule: InjectionSchedule) -> BiologicalRates:
    """Natural-scale rates at time t under the given model and schedule."""
    pop.validate_for(spec.variant)
    pi_effect = _proliferation_effect(schedule, spec, pop, t)
    if schedule.injection_times:
        mq_effect = pop.mortality_effect * dose_covariate(schedule.dose) * _mortality_ramp_value(
            schedule, spec, t
        )
    else:
        mq_effect = 0.0
    return BiologicalRates(
        production=math.exp(pop.log_production + u.production),
        reversion=math.exp(pop.log_reversion + u.reversion),
        proliferation=math.exp(pop.log_proliferation + pi_effect),
        mortality_quiescent=math.exp(pop.log_mortality_quiescent + mq_effect),
        mortality_proliferating=math.exp(pop.log_mortality_proliferating),
    )


def discontinuities(schedule: InjectionSchedule, spec: ModelSpec):
    """All rate discontinuities/kinks induced by the schedule (unclipped)."""
    pts = set()
    for t in schedule.injection_times:
        pts.add(t)
        pts.add(t + spec.effect_window)
    for cs in schedule.cycle_starts:
        pts.add(cs + spec.mortality_onset)
        pts.add(cs + spec.ramp_plateau)
        pts.add(cs + spec.ramp_end)
    return sorted(pts)


def breakpoints(schedule: InjectionSchedule, spec: ModelSpec, horizon) -> np.ndarray:
    """Sorted, deduplicated discontinuities of rates_at within [0, horizon]."""
    if not horizon > 0:
        raise ValidationError("horizon must be > 0")
    return np.array([t for t in discontinuities(schedule, spec) if 0.0 <= t <= horizon])


def compile_program(spec: ModelSpec, pop: PopulationParams, schedule: InjectionSchedule,
                    t_start, t_end) -> list[RateSegment]:
    """Piecewise rate program for [t_start, t_end].

    Between consecutive knots the proliferation rate is constant; the
    quiescent-mortality rate is constant except on ramp segments, where it
    decays exponentially-of-linear toward baseline.
    """
    pop.validate_for(spec.variant)
    if t_end < t_start:
        raise ValidationError("t_end must be >= t_start")
    knots = [t_start]
    knots += [t for t in discontinuities(schedule, spec) if t_start < t < t_end]
    knots.append(max(t_end, t_start + 1e-9))
    dc = dose_covariate(schedule.dose) if schedule.injection_times else 0.0
    segments = []
    for left, right in zip(knots[:-1], knots[1:]):
        mid = 0.5 * (left + right)
        pi_seg = math.exp(pop.log_proliferation + _proliferation_effect(schedule, spec, pop, mid))
        cs = schedule.last_cycle_start(mid)
        if cs is None:
            seg = RateSegment(left, right, pi_seg,
                              mortality_q=math.exp(pop.log_mortality_quiescent))
        else:
            since = mid - cs
            if spec.ramp_plateau < since <= spec.ramp_end:
                seg = RateSegment(
                    left, right, pi_seg,
                    ramp=(pop.log_mortality_quiescent, pop.mortality_effect * dc,
                          cs, spec.ramp_plateau, spec.ramp_end),
                )
            else:
                f = _mortality_ramp_value(schedule, spec, mid)
                seg = RateSegment(
                    left, right, pi_seg,
                    mortality_q=math.exp(pop.log_mortality_quiescent
                                         + pop.mortality_effect * dc * f),
                )
        segments.append(seg)
    return segments


# ---------------------------------------------------------------------------
# estimation-scale parameter naming shared by likelihood priors and fitting

SIGMA_PARAM_NAMES = ("log_sd_production", "log_sd_reversion", "log_noise_cd4", "log_noise_ki67")


def param_names(variant: ModelVariant) -> list[str]:
    """Ordered estimation-scale parameter names for a variant."""
    names = [
        "log_production",
        "log_reversion",
        "log_proliferation",
        "log_mortality_quiescent",
        "log_mortality_proliferating",
    ]
    if variant is ModelVariant.BASIC:
        names.append("boost")
    else:
        names += ["boost_1", "boost_2", "boost_3"]
    names.append("mortality_effect")
    if variant is ModelVariant.REPEATED_CYCLE:
        names.append("repeat_cycle_effect")
    names += list(SIGMA_PARAM_NAMES)
    return names


def pack(pop: PopulationParams, variant: ModelVariant) -> np.ndarray:
    """Estimation-scale vector (sigmas on log scale)."""
    pop.validate_for(variant)
    vec = [
        pop.log_production,
        pop.log_reversion,
        pop.log_proliferation,
        pop.log_mortality_quiescent,
        pop.log_mortality_proliferating,
        *pop.proliferation_boosts,
        pop.mortality_effect,
    ]
    if variant is ModelVariant.REPEATED_CYCLE:
        vec.append(pop.repeat_cycle_effect)
    vec += [
        math.log(pop.sd_production),
        math.log(pop.sd_reversion),
        math.log(pop.noise_cd4),
        math.log(pop.noise_ki67),
    ]
    return np.array(vec, dtype=float)


def unpack(theta, variant: ModelVariant) -> PopulationParams:
    """Inverse of pack()."""
    theta = np.asarray(theta, dtype=float)
    expected = len(param_names(variant))
    if theta.shape != (expected,):
        raise ValidationError(f"expected {expected} parameters for {variant.value}")
    n_boost = 1 if variant is ModelVariant.BASIC else 3
    i = 5
    boosts = tuple(theta[i:i + n_boost])
    i += n_boost
    mortality_effect = float(theta[i])
    i += 1
    repeat = None
    if variant is ModelVariant.REPEATED_CYCLE:
        repeat = float(theta[i])
        i += 1
    return PopulationParams(
        log_production=float(theta[0]),
        log_reversion=float(theta[1]),
        log_proliferation=float(theta[2]),
        log_mortality_quiescent=float(theta[3]),
        log_mortality_proliferating=float(theta[4]),
        proliferation_boosts=boosts,
        mortality_effect=mortality_effect,
        repeat_cycle_effect=repeat,
        sd_production=float(np.exp(theta[i])),
        sd_reversion=float(np.exp(theta[i + 1])),
        noise_cd4=float(np.exp(theta[i + 2])),
        noise_ki67=float(np.exp(theta[i + 3])),
    )
