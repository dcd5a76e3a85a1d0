"""Command-line front end.

Commands: fit, simulate, compare-protocols, generate, predict.
Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
Options may come from a JSON config file (--config); explicit flags win over
the file, the file wins over defaults, and unknown file keys are rejected.
CD4DYN_WORKERS caps the per-patient worker count unless --workers is given.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import dataio, estimation, likelihood, protocols
from .covariates import ModelSpec, ModelVariant, RandomEffects
from .errors import NumericalError, ValidationError
from .estimation import OptimizerConfig
from .preset_store import PRESET_NAMES, load_preset
from .protocols import PROTOCOLS, ProtocolSpec, VisitDesign

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _float_list(text):
    return tuple(float(x) for x in text.split(",") if x != "")


def _int_list(text):
    return tuple(int(x) for x in text.split(",") if x != "")


def _add_common(parser):
    parser.add_argument("--config", help="JSON file with option defaults")
    parser.add_argument("--preset", choices=PRESET_NAMES,
                        help="named parameter preset supplying model, parameters and priors")


def _merge_config(args, parser):
    """flags > config file > argparse defaults; unknown file keys rejected."""
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config) as handle:
            file_values = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {args.config}: invalid JSON ({exc})")
    if not isinstance(file_values, dict):
        raise ValidationError(f"config {args.config}: top level must be an object")
    known = set(vars(args))
    unknown = [k for k in file_values if k not in known]
    if unknown:
        raise ValidationError(f"config {args.config}: unknown keys {sorted(unknown)}")
    defaults = {a.dest: parser.get_default(a.dest) for a in parser._actions}
    for key, value in file_values.items():
        if getattr(args, key) == defaults.get(key):
            setattr(args, key, value)
    return args


def _resolve_model(args):
    """(spec, params-or-None, prior) from --preset or --model flags."""
    if args.preset:
        preset = load_preset(args.preset)
        spec = preset.spec
        if getattr(args, "feedback_exponent", None) is not None:
            spec = ModelSpec(spec.variant, float(args.feedback_exponent))
        return spec, preset.params, preset.prior
    variant = ModelVariant(getattr(args, "model", None) or "repeated-cycle")
    nu = getattr(args, "feedback_exponent", None) or 0.0
    return ModelSpec(variant, float(nu)), None, estimation.standard_prior()


def _random_effects(args, pop):
    if getattr(args, "production_rate", None) is not None or getattr(
        args, "reversion_rate", None
    ) is not None:
        if args.production_rate is None or args.reversion_rate is None:
            raise ValidationError("--production-rate and --reversion-rate go together")
        return RandomEffects.from_natural(args.production_rate, args.reversion_rate, pop)
    if getattr(args, "u", None):
        values = _float_list(args.u)
        if len(values) != 2:
            raise ValidationError("--u expects two comma-separated values")
        return RandomEffects(*values)
    return RandomEffects()


def _protocol_spec(args, name="A"):
    base = PROTOCOLS[name]
    return ProtocolSpec(
        initial_cycle_injections=args.initial_injections
        if args.initial_injections is not None
        else base.initial_cycle_injections,
        repeated_cycle_injections=args.repeated_injections
        if args.repeated_injections is not None
        else base.repeated_cycle_injections,
        trigger_threshold=args.trigger_threshold
        if args.trigger_threshold is not None
        else base.trigger_threshold,
        assessment_interval=args.assessment_interval
        if args.assessment_interval is not None
        else base.assessment_interval,
        horizon=args.horizon if args.horizon is not None else base.horizon,
        dose=args.dose if args.dose is not None else base.dose,
        min_cycle_gap=args.min_cycle_gap
        if args.min_cycle_gap is not None
        else base.min_cycle_gap,
    )


def _optimizer_config(args):
    kwargs = {}
    for field in ("rdm_threshold", "max_iterations", "nodes", "workers"):
        value = getattr(args, field, None)
        if value is not None:
            kwargs[field] = value
    return OptimizerConfig(**kwargs)


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args, parser):
    args = _merge_config(args, parser)
    spec, preset_params, prior = _resolve_model(args)
    cohort = dataio.load_cohort(args.observations, args.injections)
    cohort = [p for p in cohort if p.observations]
    if not cohort:
        raise ValidationError("no patients with observations in the input files")
    config = _optimizer_config(args)
    init = preset_params if args.init_from_preset and preset_params is not None else (
        estimation.default_init(spec, prior)
    )
    result = estimation.fit(cohort, spec, prior, init, config)
    dataio.write_fit_report(args.out, result.to_report())
    print(f"fit: {len(cohort)} patients, {result.iterations} iterations, "
          f"rdm {result.final_rdm:.4f}, lcva {result.lcva:.4f} -> {args.out}")
    return EXIT_OK


def cmd_generate(args, parser):
    args = _merge_config(args, parser)
    preset = load_preset(args.preset or "table3-cycle")
    spec, pop = preset.spec, preset.params
    design = VisitDesign(
        cycle_starts=_float_list(args.cycle_starts),
        injections_per_cycle=_int_list(args.injections_per_cycle),
        dose=args.dose if args.dose is not None else 20.0,
        ki67_fraction=args.ki67_fraction,
    )
    records, effects = protocols.synthetic_cohort(
        spec, pop, args.n, design, seed=args.seed, return_truth=True,
        noise=not args.noise_free,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    dataio.write_observations(os.path.join(args.out_dir, "observations.csv"), records)
    dataio.write_injections(os.path.join(args.out_dir, "injections.csv"), records)
    dataio.write_truth(
        os.path.join(args.out_dir, "truth.json"), spec, pop, args.seed, records, effects
    )
    print(f"generate: wrote {len(records)} patients to {args.out_dir}")
    return EXIT_OK


def cmd_simulate(args, parser):
    args = _merge_config(args, parser)
    spec, pop, _ = _resolve_model(args)
    if pop is None:
        raise ValidationError("simulate requires --preset for parameter values")
    u = _random_effects(args, pop)
    proto = _protocol_spec(args, args.protocol or "A")
    report = protocols.run_protocol(proto, spec, pop, u)
    dataio.write_trajectory(args.out, report.trajectory, report.schedule)
    print(
        f"simulate: protocol {args.protocol or 'A'}: {report.n_injections} injections, "
        f"{report.n_cycles} cycles, {report.days_below_500} days below 500, "
        f"median {report.median_cd4:.1f} -> {args.out}"
    )
    return EXIT_OK


def cmd_compare(args, parser):
    args = _merge_config(args, parser)
    spec, pop, _ = _resolve_model(args)
    if pop is None:
        raise ValidationError("compare-protocols requires --preset for parameter values")
    u = _random_effects(args, pop)
    names = [n.strip() for n in args.protocols.split(",") if n.strip()]
    unknown = [n for n in names if n not in PROTOCOLS]
    if unknown:
        raise ValidationError(f"unknown protocols {unknown}; available: {sorted(PROTOCOLS)}")
    protos = {name: _protocol_spec(args, name) for name in names}
    outcomes = protocols.compare_protocols(protos, spec, pop, u)
    dataio.write_comparison(args.out, outcomes)
    if args.traj_dir:
        os.makedirs(args.traj_dir, exist_ok=True)
        for outcome in outcomes:
            if outcome.report is not None:
                dataio.write_trajectory(
                    os.path.join(args.traj_dir, f"trajectory_{outcome.name}.csv"),
                    outcome.report.trajectory,
                    outcome.report.schedule,
                )
    print(f"compare-protocols: {len(outcomes)} rows -> {args.out}")
    return EXIT_OK


def _params_from_report(path):
    with open(path) as handle:
        report = json.load(handle)
    variant = ModelVariant(report["model"])
    spec = ModelSpec(variant, float(report.get("feedback_exponent", 0.0)))
    from . import covariates

    theta = np.array(
        [report["parameters"][name]["estimate"] for name in covariates.param_names(variant)]
    )
    return spec, covariates.unpack(theta, variant)


def cmd_predict(args, parser):
    args = _merge_config(args, parser)
    if args.fit_report:
        spec, pop = _params_from_report(args.fit_report)
    else:
        spec, pop, _ = _resolve_model(args)
        if pop is None:
            raise ValidationError("predict requires --preset or --fit-report")
    cohort = dataio.load_cohort(args.observations, args.injections)
    by_id = {p.id: p for p in cohort}
    if args.patient is not None:
        if args.patient not in by_id:
            raise ValidationError(f"patient {args.patient!r} not found in the input files")
        selected = [by_id[args.patient]]
    else:
        selected = cohort
    os.makedirs(args.out_dir, exist_ok=True)
    horizon = args.horizon if args.horizon is not None else 360.0
    for patient in selected:
        trajectory = estimation.predict_individual(patient, spec, pop, horizon)
        dataio.write_prediction(
            os.path.join(args.out_dir, f"prediction_{patient.id}.csv"),
            trajectory,
            patient.observations,
        )
    print(f"predict: wrote {len(selected)} prediction files to {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cd4dyn",
        description="CD4+ T-cell dynamics under interleukin-7 injection cycles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a covariate model to a cohort")
    _add_common(fit)
    fit.add_argument("--observations", required=True)
    fit.add_argument("--injections", required=True)
    fit.add_argument("--out", required=True, help="fit report JSON path")
    fit.add_argument("--model", choices=[v.value for v in ModelVariant])
    fit.add_argument("--feedback-exponent", type=float, default=None)
    fit.add_argument("--rdm-threshold", type=float, default=None)
    fit.add_argument("--max-iterations", type=int, default=None)
    fit.add_argument("--nodes", type=int, default=None)
    fit.add_argument("--workers", type=int, default=None)
    fit.add_argument("--init-from-preset", action="store_true",
                     help="start from the preset estimates instead of prior means")
    fit.set_defaults(func=cmd_fit, parser=fit)

    gen = sub.add_parser("generate", help="generate a synthetic cohort")
    _add_common(gen)
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise-free", action="store_true")
    gen.add_argument("--cycle-starts", default="0,270")
    gen.add_argument("--injections-per-cycle", default="3,3")
    gen.add_argument("--dose", type=float, default=None)
    gen.add_argument("--ki67-fraction", type=float, default=0.3)
    gen.set_defaults(func=cmd_generate, parser=gen)

    sim = sub.add_parser("simulate", help="simulate one administration protocol")
    _add_common(sim)
    sim.add_argument("--out", required=True, help="trajectory CSV path")
    sim.add_argument("--protocol", choices=sorted(PROTOCOLS))
    sim.add_argument("--u", help="random effects, e.g. 0,0")
    sim.add_argument("--production-rate", type=float, default=None)
    sim.add_argument("--reversion-rate", type=float, default=None)
    sim.add_argument("--feedback-exponent", type=float, default=None)
    for flag in ("--initial-injections", "--repeated-injections"):
        sim.add_argument(flag, type=int, default=None)
    for flag in ("--trigger-threshold", "--assessment-interval", "--horizon",
                 "--dose", "--min-cycle-gap"):
        sim.add_argument(flag, type=float, default=None)
    sim.set_defaults(func=cmd_simulate, parser=sim)

    cmp_ = sub.add_parser("compare-protocols", help="criteria table across protocols")
    _add_common(cmp_)
    cmp_.add_argument("--out", required=True, help="comparison CSV path")
    cmp_.add_argument("--protocols", default="A,B,C,D")
    cmp_.add_argument("--traj-dir", help="also write one trajectory CSV per protocol")
    cmp_.add_argument("--u", help="random effects, e.g. 0,0")
    cmp_.add_argument("--production-rate", type=float, default=None)
    cmp_.add_argument("--reversion-rate", type=float, default=None)
    cmp_.add_argument("--feedback-exponent", type=float, default=None)
    for flag in ("--initial-injections", "--repeated-injections"):
        cmp_.add_argument(flag, type=int, default=None)
    for flag in ("--trigger-threshold", "--assessment-interval", "--horizon",
                 "--dose", "--min-cycle-gap"):
        cmp_.add_argument(flag, type=float, default=None)
    cmp_.set_defaults(func=cmd_compare, parser=cmp_)

    pred = sub.add_parser("predict", help="empirical-Bayes individual predictions")
    _add_common(pred)
    pred.add_argument("--observations", required=True)
    pred.add_argument("--injections", required=True)
    pred.add_argument("--out-dir", required=True)
    pred.add_argument("--fit-report", help="use parameters from a fit report JSON")
    pred.add_argument("--patient", help="single patient id (default: all)")
    pred.add_argument("--horizon", type=float, default=None)
    pred.add_argument("--feedback-exponent", type=float, default=None)
    pred.set_defaults(func=cmd_predict, parser=pred)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, args.parser)
    except ValidationError as exc:
        print(f"error[validation]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
