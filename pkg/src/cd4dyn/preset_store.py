"""Named parameter presets: published posterior means/SDs as ready-to-use models."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import covariates
from .covariates import ModelSpec, ModelVariant, PopulationParams
from .errors import ValidationError
from .likelihood import GaussianPrior, PriorSpec

PRESET_NAMES = ("table1-basic", "table2-3beta", "table3-cycle", "table8-feedback")


@dataclass(frozen=True)
class Preset:
    name: str
    spec: ModelSpec
    params: PopulationParams
    prior: PriorSpec
    posterior_sd: dict
    natural_posterior: dict
    published_fit: dict

    def theta(self) -> np.ndarray:
        return covariates.pack(self.params, self.spec.variant)


def _params_from_mapping(values: dict, variant: ModelVariant) -> PopulationParams:
    theta = []
    for name in covariates.param_names(variant):
        if name.startswith("log_sd_") or name.startswith("log_noise_"):
            theta.append(math.log(values[name.replace("log_", "", 1)]))
        else:
            theta.append(values[name])
    return covariates.unpack(np.array(theta), variant)


def load_preset(name: str) -> Preset:
    """Load one of the shipped presets by name."""
    if name not in PRESET_NAMES:
        raise ValidationError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    raw = json.loads(
        resources.files("cd4dyn.presets").joinpath(f"{name}.json").read_text()
    )
    variant = ModelVariant(raw["model"])
    spec = ModelSpec(variant=variant, feedback_exponent=float(raw["feedback_exponent"]))
    params = _params_from_mapping(raw["params"], variant)
    prior = PriorSpec(
        {key: GaussianPrior(mean, sd) for key, (mean, sd) in raw["prior"].items()}
    )
    return Preset(
        name=name,
        spec=spec,
        params=params,
        prior=prior,
        posterior_sd=dict(raw["posterior_sd"]),
        natural_posterior={k: tuple(v) for k, v in raw["natural_posterior"].items()},
        published_fit=dict(raw["published_fit"]),
    )
