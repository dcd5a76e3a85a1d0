"""Mechanistic CD4+ T-cell dynamics under interleukin-7 injection cycles.

Library layout:
  dynamics     two-compartment system, equilibrium, integration
  covariates   injection schedules and the three statistical rate models
  likelihood   fourth-root observation model, conditional/marginal likelihoods
  estimation   penalized-likelihood fitting, model criteria, individual fits
  protocols    re-treatment strategy simulation, synthetic cohorts
  preset_store published parameter presets
  dataio, cli  CSV/JSON interchange and the command-line front end
"""

from .covariates import (
    InjectionSchedule,
    ModelSpec,
    ModelVariant,
    PopulationParams,
    RandomEffects,
    breakpoints,
    dose_covariate,
    injection_rank,
    rates_at,
    survival_ramp,
)
from .dynamics import (
    BiologicalRates,
    CompartmentState,
    FeedbackSpec,
    Trajectory,
    derivatives,
    equilibrium,
    integrate,
)
from .estimation import (
    FitResult,
    OptimizerConfig,
    empirical_bayes_mode,
    fit,
    lcva,
    predict_individual,
    profile_feedback,
    rdm,
    score_and_curvature,
    standard_prior,
)
from .likelihood import (
    GaussianPrior,
    Observation,
    ObservationKind,
    PatientRecord,
    PriorSpec,
    conditional_loglik,
    fourth_root,
    marginal_loglik,
    model_trajectory,
    penalized_loglik,
    total_loglik,
)
from .preset_store import PRESET_NAMES, Preset, load_preset
from .protocols import (
    PROTOCOLS,
    ProtocolReport,
    ProtocolSpec,
    VisitDesign,
    compare_protocols,
    run_protocol,
    synthetic_cohort,
)

__version__ = "0.1.0"
