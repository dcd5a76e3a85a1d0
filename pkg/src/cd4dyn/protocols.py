"""Administration-strategy simulation and synthetic-cohort generation.

A protocol starts one cycle at day 0 and then re-treats adaptively: the
modeled CD4 count is checked at fixed assessment intervals and a new cycle
of weekly injections starts whenever the count sits strictly below the
trigger threshold, no cycle is already in progress, and the configured gap
since the previous cycle has passed.  Four preset strategies A-D differ only
in how many injections the initial and the repeated cycles contain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import covariates, dynamics, likelihood
from .covariates import (
    InjectionSchedule,
    ModelSpec,
    PopulationParams,
    RandomEffects,
    WEEK,
)
from .errors import NumericalError, ValidationError
from .likelihood import Observation, ObservationKind, PatientRecord


@dataclass(frozen=True)
class ProtocolSpec:
    """Re-treatment rule: cycle sizes, trigger, assessment cadence, horizon."""

    initial_cycle_injections: int
    repeated_cycle_injections: int
    trigger_threshold: float = 550.0
    assessment_interval: float = 90.0
    horizon: float = 1440.0
    dose: float = 20.0
    min_cycle_gap: float = 0.0

    def __post_init__(self):
        for n in (self.initial_cycle_injections, self.repeated_cycle_injections):
            if not 1 <= n <= covariates.MAX_INJECTIONS_PER_CYCLE:
                raise ValidationError(f"injections per cycle must be 1..3, got {n}")
        if not self.horizon > self.assessment_interval > 0:
            raise ValidationError("need horizon > assessment_interval > 0")
        if not self.trigger_threshold > 0:
            raise ValidationError("trigger threshold must be > 0")
        if self.min_cycle_gap < 0:
            raise ValidationError("min_cycle_gap must be >= 0")


PROTOCOLS = {
    "A": ProtocolSpec(3, 3),
    "B": ProtocolSpec(3, 2),
    "C": ProtocolSpec(3, 1),
    "D": ProtocolSpec(2, 2),
}


@dataclass(frozen=True)
class ProtocolReport:
    """Outcome criteria over the simulation horizon plus the realized schedule."""

    n_injections: int
    n_cycles: int
    days_below_500: int
    median_cd4: float
    trajectory: dynamics.Trajectory
    schedule: InjectionSchedule


def _cycle_injection_count(start, wanted, horizon):
    """Injections of a cycle that fit before the horizon (at least 1)."""
    n = 0
    for k in range(wanted):
        if start + WEEK * k <= horizon:
            n += 1
    return n


def run_protocol(proto: ProtocolSpec, spec: ModelSpec, pop: PopulationParams,
                 u: RandomEffects = RandomEffects(),
                 rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL) -> ProtocolReport:
    """Simulate one strategy for one individual from the pre-treatment equilibrium."""
    pop.validate_for(spec.variant)
    horizon = float(proto.horizon)
    lam = np.array([math.exp(pop.log_production + u.production)])
    rho = np.array([math.exp(pop.log_reversion + u.reversion)])
    mortality_p = math.exp(pop.log_mortality_proliferating)

    eq = dynamics.equilibrium(pop.baseline_rates(u), spec.feedback)
    days = np.arange(0.0, horizon + 0.5)
    quiescent = np.empty(len(days))
    proliferating = np.empty(len(days))
    quiescent[0], proliferating[0] = eq.quiescent, eq.proliferating

    cycle_starts = [0.0]
    counts = [_cycle_injection_count(0.0, proto.initial_cycle_injections, horizon)]
    n_assess = int(math.ceil(horizon / proto.assessment_interval)) - 1
    assessments = [proto.assessment_interval * (k + 1) for k in range(n_assess)]
    assessments = [a for a in assessments if a < horizon]
    checkpoints = assessments + [horizon]

    y = np.array([[eq.quiescent, eq.proliferating]])
    t_cur = 0.0
    for checkpoint in checkpoints:
        schedule = InjectionSchedule.from_cycles(cycle_starts, counts, proto.dose)
        program = covariates.compile_program(spec, pop, schedule, t_cur, checkpoint)
        inside = (days > t_cur) & (days <= checkpoint)
        targets = days[inside]
        eval_times = targets if len(targets) and targets[-1] == checkpoint else np.append(
            targets, checkpoint
        )
        states = dynamics.propagate_program(
            program, lam, rho, mortality_p, spec.feedback_exponent, y, eval_times, rtol, atol
        )
        filled = states[:, : len(targets), :] if len(eval_times) > len(targets) else states
        quiescent[inside] = filled[0, :, 0]
        proliferating[inside] = filled[0, :, 1]
        y = states[:, -1, :]
        t_cur = checkpoint
        if checkpoint >= horizon:
            break
        cd4_now = float(y[0, 0] + y[0, 1])
        in_progress = covariates.injection_rank(schedule, checkpoint, spec.effect_window)
        gap_ok = (
            proto.min_cycle_gap <= 0
            or checkpoint - cycle_starts[-1] >= proto.min_cycle_gap
        )
        if cd4_now < proto.trigger_threshold and in_progress is None and gap_ok:
            cycle_starts.append(checkpoint)
            counts.append(
                _cycle_injection_count(checkpoint, proto.repeated_cycle_injections, horizon)
            )

    schedule = InjectionSchedule.from_cycles(cycle_starts, counts, proto.dose)
    trajectory = dynamics.Trajectory(days, quiescent, proliferating)
    cd4 = trajectory.cd4
    return ProtocolReport(
        n_injections=schedule.n_injections,
        n_cycles=schedule.n_cycles,
        days_below_500=int(np.sum(cd4[:-1] < 500.0)),
        median_cd4=float(np.median(cd4)),
        trajectory=trajectory,
        schedule=schedule,
    )


@dataclass(frozen=True)
class ProtocolOutcome:
    name: str
    report: ProtocolReport | None
    error: str | None = None


def compare_protocols(protocols, spec, pop, u: RandomEffects = RandomEffects(),
                      rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL):
    """Run several strategies; one outcome row per protocol, failures recorded.

    protocols: mapping name -> ProtocolSpec, or an iterable of preset names.
    """
    if not isinstance(protocols, dict):
        unknown = [name for name in protocols if name not in PROTOCOLS]
        if unknown:
            raise ValidationError(f"unknown protocol presets: {unknown}")
        protocols = {name: PROTOCOLS[name] for name in protocols}
    outcomes = []
    for name, proto in protocols.items():
        try:
            report = run_protocol(proto, spec, pop, u, rtol, atol)
        except NumericalError as exc:
            outcomes.append(ProtocolOutcome(name, None, str(exc)))
            continue
        outcomes.append(ProtocolOutcome(name, report))
    return outcomes


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass(frozen=True)
class VisitDesign:
    """Observation plan for generated cohorts.

    CD4 visits repeat relative to every cycle start; Ki67 visits happen in
    the first cycle only, for the leading ki67_fraction of patients (the
    trials measured the proliferation marker in a subset).  extra_cd4_times
    are absolute days (e.g. quarterly checks).
    """

    cycle_starts: tuple[float, ...] = (0.0, 270.0)
    injections_per_cycle: tuple[int, ...] = (3, 3)
    dose: float = 20.0
    cd4_offsets: tuple[float, ...] = (0.0, 7.0, 14.0, 21.0, 28.0, 35.0, 56.0, 77.0)
    ki67_offsets: tuple[float, ...] = (0.0, 7.0, 14.0, 28.0, 77.0)
    extra_cd4_times: tuple[float, ...] = (90.0, 180.0)
    ki67_fraction: float = 0.3

    def schedule(self) -> InjectionSchedule:
        return InjectionSchedule.from_cycles(
            self.cycle_starts, self.injections_per_cycle, self.dose
        )

    def cd4_times(self):
        times = set(self.extra_cd4_times)
        for start in self.cycle_starts:
            times.update(start + off for off in self.cd4_offsets)
        return sorted(times)

    def ki67_times(self):
        first = self.cycle_starts[0] if self.cycle_starts else 0.0
        return sorted(first + off for off in self.ki67_offsets)


def synthetic_cohort(spec, pop, n, design=VisitDesign(), seed=0,
                     return_truth=False, noise=True,
                     rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL):
    """Generate n patients from the population model, deterministically per seed.

    Random effects are drawn from N(0, diag(sd_production^2, sd_reversion^2));
    noise is added on the fourth-root scale and back-transformed, so values
    stay nonnegative.  Per-patient generators are split from the seed, so any
    prefix of the cohort is reproducible independent of n.
    """
    if n < 1:
        raise ValidationError("cohort size must be >= 1")
    pop.validate_for(spec.variant)
    schedule = design.schedule()
    cd4_times = np.array(design.cd4_times())
    ki67_times = np.array(design.ki67_times())
    n_ki67 = int(math.ceil(design.ki67_fraction * n))
    seeds = np.random.SeedSequence(seed).spawn(n)
    records = []
    truth = []
    all_times = np.unique(np.concatenate([cd4_times, ki67_times]))
    cd4_slots = np.searchsorted(all_times, cd4_times)
    ki67_slots = np.searchsorted(all_times, ki67_times)
    for i in range(n):
        rng = np.random.default_rng(seeds[i])
        u = RandomEffects(
            production=float(rng.normal(0.0, pop.sd_production)),
            reversion=float(rng.normal(0.0, pop.sd_reversion)),
        )
        has_ki67 = i < n_ki67
        traj = likelihood.model_trajectory(schedule, spec, pop, u, all_times, rtol, atol)
        observations = []
        for slot, t in zip(cd4_slots, cd4_times):
            eps = rng.normal(0.0, pop.noise_cd4) if noise else 0.0
            value = (traj.cd4[slot] ** 0.25 + eps) ** 4
            observations.append(Observation(float(t), ObservationKind.CD4, float(value)))
        if has_ki67:
            for slot, t in zip(ki67_slots, ki67_times):
                eps = rng.normal(0.0, pop.noise_ki67) if noise else 0.0
                value = (traj.ki67[slot] ** 0.25 + eps) ** 4
                observations.append(Observation(float(t), ObservationKind.KI67, float(value)))
        records.append(PatientRecord(f"P{i:04d}", schedule, tuple(observations)))
        truth.append(u)
    if return_truth:
        return records, truth
    return records
