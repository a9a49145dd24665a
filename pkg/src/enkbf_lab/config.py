"""TOML run configuration with ``[model]``, ``[experiment]`` and ``[estimator]`` sections.

``[model]`` either spells the model out (``d_x, d_y, A, C, R1, R2, m0, P0``
and optional ``seed``, matrices as row-major flat lists) or names a random
model through generator keys (``d_x, d_y, block_size, stability_margin,
seed``). Unknown sections or keys raise ConfigInvalid.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigInvalid
from .model import Model, ModelGenSpec, make_ou_model, model_from_dict, tomllib

SECTIONS = ("model", "experiment", "estimator")
GENERATOR_KEYS = {f.name for f in fields(ModelGenSpec)}
EXPLICIT_MARKERS = {"A", "C", "R1", "R2", "m0", "P0"}
EXPERIMENT_KEYS = {
    "kind", "T", "seed", "levels", "replicates", "n_records", "variants", "estimators", "out",
    "p_levels", "N0", "l_start", "bias_method", "bias_n", "dt_replicates", "bias_level",
    "dt_reference", "m_values", "p_for_l_axis", "l_for_p_axis", "fit_l_from", "threads",
}
ESTIMATOR_KEYS = {
    "variant", "estimator", "N0", "l_start", "l_max", "p_max", "pmf_kind", "alpha", "M",
    "particles", "n_base", "level", "share_initial",
}


@dataclass
class LabConfig:
    model: Model | None = None
    generator: ModelGenSpec | None = None
    experiment: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)

    def build_model(self) -> Model | None:
        if self.model is not None:
            return self.model
        if self.generator is not None:
            return make_ou_model(self.generator)
        return None


def _check_keys(section: str, data: dict, allowed: set):
    unknown = set(data) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown keys in [{section}]: {sorted(unknown)}")


def parse_config(data: dict) -> LabConfig:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigInvalid(f"unknown config sections: {sorted(unknown)}")
    for name in SECTIONS:
        if name in data and not isinstance(data[name], dict):
            raise ConfigInvalid(f"[{name}] must be a table")
    cfg = LabConfig()
    model = data.get("model")
    if model:
        if EXPLICIT_MARKERS & set(model):
            cfg.model = model_from_dict(model)
        else:
            _check_keys("model", model, GENERATOR_KEYS)
            if "d_x" not in model:
                raise ConfigInvalid("[model] needs d_x")
            gen = dict(model)
            gen.setdefault("d_y", gen["d_x"])
            cfg.generator = ModelGenSpec(**gen)
    exp = data.get("experiment", {})
    _check_keys("experiment", exp, EXPERIMENT_KEYS)
    est = data.get("estimator", {})
    _check_keys("estimator", est, ESTIMATOR_KEYS)
    cfg.experiment, cfg.estimator = dict(exp), dict(est)
    return cfg


def load_config(path) -> LabConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"config file {path}: {exc}") from None
    return parse_config(data)
