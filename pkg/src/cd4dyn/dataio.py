"""CSV/JSON interchange for cohorts, fit reports, comparisons, trajectories.

Schemas:
  observations.csv  patient_id,time_days,kind,value        kind in {CD4, KI67}
  injections.csv    patient_id,time_days,dose_ug_per_kg
  trajectory.csv    time_days,cd4,ki67,injections_marker
  comparison.csv    protocol,n_injections,n_cycles,days_below_500,median_cd4

Times are days since the patient's first injection (negative allowed for
pre-treatment visits).  Injection rows carry no cycle column; cycles are
derived greedily: a new cycle starts when the gap since the previous
injection exceeds a week or the running cycle already has three injections.
All writers go through a temp-file-plus-rename so outputs are atomic.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from contextlib import contextmanager

import numpy as np

from .covariates import InjectionSchedule, WEEK
from .errors import ValidationError
from .likelihood import Observation, ObservationKind, PatientRecord

_GAP_TOL = 1e-9


@contextmanager
def atomic_write(path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_float(text, what, path, line_no):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"{path}:{line_no}: bad {what} {text!r}")


def read_observations(path):
    """patient_id -> list of Observation; parse errors carry line numbers."""
    by_patient = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        required = {"patient_id", "time_days", "kind", "value"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValidationError(
                f"{path}: header must contain {sorted(required)}, got {reader.fieldnames}"
            )
        for line_no, row in enumerate(reader, start=2):
            pid = (row["patient_id"] or "").strip()
            if not pid:
                raise ValidationError(f"{path}:{line_no}: empty patient_id")
            time = _parse_float(row["time_days"], "time_days", path, line_no)
            kind_text = (row["kind"] or "").strip().upper()
            try:
                kind = ObservationKind(kind_text)
            except ValueError:
                raise ValidationError(
                    f"{path}:{line_no}: kind must be CD4 or KI67, got {row['kind']!r}"
                )
            value = _parse_float(row["value"], "value", path, line_no)
            if value < 0:
                raise ValidationError(f"{path}:{line_no}: negative count {value}")
            by_patient.setdefault(pid, []).append(Observation(time, kind, value))
    return by_patient


def derive_cycles(times):
    """Greedy grouping of sorted injection times into weekly cycles of <= 3."""
    starts = []
    count = 0
    prev = None
    for t in times:
        if prev is None or t - prev > WEEK + _GAP_TOL or count == 3:
            starts.append(t)
            count = 1
        else:
            count += 1
        prev = t
    return starts


def read_injections(path):
    """patient_id -> InjectionSchedule (cycles derived, dose must be unique)."""
    rows = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        required = {"patient_id", "time_days", "dose_ug_per_kg"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValidationError(
                f"{path}: header must contain {sorted(required)}, got {reader.fieldnames}"
            )
        for line_no, row in enumerate(reader, start=2):
            pid = (row["patient_id"] or "").strip()
            if not pid:
                raise ValidationError(f"{path}:{line_no}: empty patient_id")
            time = _parse_float(row["time_days"], "time_days", path, line_no)
            dose = _parse_float(row["dose_ug_per_kg"], "dose_ug_per_kg", path, line_no)
            if dose <= 0:
                raise ValidationError(f"{path}:{line_no}: dose must be > 0, got {dose}")
            rows.setdefault(pid, []).append((time, dose))
    schedules = {}
    for pid, entries in rows.items():
        entries.sort()
        times = [t for t, _ in entries]
        doses = sorted({d for _, d in entries})
        if len(doses) != 1:
            raise ValidationError(
                f"patient {pid!r}: multiple doses {doses}; one dose per patient supported"
            )
        try:
            schedules[pid] = InjectionSchedule(
                tuple(times), tuple(derive_cycles(times)), doses[0]
            )
        except ValidationError as exc:
            raise ValidationError(f"patient {pid!r}: {exc}") from exc
    return schedules


def build_patients(observations, schedules, default_dose=20.0):
    """Merge observation and schedule maps into sorted PatientRecords."""
    records = []
    for pid in sorted(set(observations) | set(schedules)):
        schedule = schedules.get(pid, InjectionSchedule.empty(default_dose))
        obs = tuple(observations.get(pid, ()))
        records.append(PatientRecord(pid, schedule, obs))
    return records


def load_cohort(observations_path, injections_path):
    return build_patients(read_observations(observations_path), read_injections(injections_path))


def write_observations(path, records):
    with atomic_write(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(["patient_id", "time_days", "kind", "value"])
        for record in records:
            for obs in record.observations:
                writer.writerow(
                    [record.id, repr(obs.time), obs.kind.value, repr(obs.value)]
                )


def write_injections(path, records):
    with atomic_write(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(["patient_id", "time_days", "dose_ug_per_kg"])
        for record in records:
            for t in record.schedule.injection_times:
                writer.writerow([record.id, repr(t), repr(record.schedule.dose)])


def write_truth(path, spec, pop, seed, records, effects):
    """Generating parameters and per-patient random effects, for recovery studies."""
    payload = {
        "seed": seed,
        "model": spec.variant.value,
        "feedback_exponent": spec.feedback_exponent,
        "params": {
            "log_production": pop.log_production,
            "log_reversion": pop.log_reversion,
            "log_proliferation": pop.log_proliferation,
            "log_mortality_quiescent": pop.log_mortality_quiescent,
            "log_mortality_proliferating": pop.log_mortality_proliferating,
            "proliferation_boosts": list(pop.proliferation_boosts),
            "mortality_effect": pop.mortality_effect,
            "repeat_cycle_effect": pop.repeat_cycle_effect,
            "sd_production": pop.sd_production,
            "sd_reversion": pop.sd_reversion,
            "noise_cd4": pop.noise_cd4,
            "noise_ki67": pop.noise_ki67,
        },
        "patients": [
            {"id": record.id, "u_production": u.production, "u_reversion": u.reversion}
            for record, u in zip(records, effects)
        ],
    }
    with atomic_write(path) as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def write_fit_report(path, report_dict):
    with atomic_write(path) as handle:
        json.dump(report_dict, handle, indent=2)
        handle.write("\n")


def write_comparison(path, outcomes):
    with atomic_write(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["protocol", "n_injections", "n_cycles", "days_below_500", "median_cd4"]
        )
        for outcome in outcomes:
            if outcome.report is None:
                writer.writerow([outcome.name, "error", "error", "error", outcome.error])
            else:
                rep = outcome.report
                writer.writerow(
                    [
                        outcome.name,
                        rep.n_injections,
                        rep.n_cycles,
                        rep.days_below_500,
                        repr(rep.median_cd4),
                    ]
                )


def write_trajectory(path, trajectory, schedule=None):
    marker_times = set()
    if schedule is not None:
        marker_times = {round(t, 9) for t in schedule.injection_times}
    with atomic_write(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(["time_days", "cd4", "ki67", "injections_marker"])
        cd4 = trajectory.cd4
        ki67 = trajectory.ki67
        for i, t in enumerate(trajectory.times):
            writer.writerow(
                [repr(float(t)), repr(float(cd4[i])), repr(float(ki67[i])),
                 1 if round(float(t), 9) in marker_times else 0]
            )


def write_prediction(path, trajectory, observations=()):
    """Per-patient prediction with observed values overlaid on matching rows."""
    obs_by_time = {}
    for obs in observations:
        obs_by_time.setdefault(round(obs.time, 9), {})[obs.kind] = obs.value
    with atomic_write(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(["time_days", "cd4", "ki67", "observed_cd4", "observed_ki67"])
        for i, t in enumerate(trajectory.times):
            overlay = obs_by_time.get(round(float(t), 9), {})
            writer.writerow(
                [
                    repr(float(t)),
                    repr(float(trajectory.cd4[i])),
                    repr(float(trajectory.ki67[i])),
                    repr(overlay[ObservationKind.CD4]) if ObservationKind.CD4 in overlay else "",
                    repr(overlay[ObservationKind.KI67]) if ObservationKind.KI67 in overlay else "",
                ]
            )
