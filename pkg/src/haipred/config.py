"""Pipeline configuration: one YAML file drives every stage.

The schema is validated before any stage runs; unknown keys anywhere in the
file are rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import yaml

from .experiment import STRATEGIES, ExperimentPlan
from .featurize import DEFAULT_CATALOG, FeatureSpec, WindowPolicy
from .gbdt import HyperparameterGrid
from .labeling import LabelParams
from .synthgen import LogNormalLOS, NoiseRates, ScenarioConfig


class ConfigError(ValueError):
    """Raised for structurally invalid configuration files."""


def _require_keys(section: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _as_mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    return dict(value)


def _class_rates(raw: Mapping, where: str) -> dict:
    out = {}
    for feature, rates in raw.items():
        rates = _as_mapping(rates, f"{where}.{feature}")
        _require_keys(rates, {"case", "control"}, f"{where}.{feature}")
        out[str(feature)] = {k: float(v) for k, v in rates.items()}
    return out


def parse_scenario(section: Mapping) -> ScenarioConfig:
    section = _as_mapping(section, "scenario")
    _require_keys(
        section,
        {
            "n_patients",
            "fraction_ventilated",
            "infection_rates",
            "los_distribution",
            "feature_effect_sizes",
            "ventilated_effect_sizes",
            "missingness_rates",
            "ventilated_missingness_rates",
            "missingness_correlation",
            "noise",
            "multi_stay_rate",
            "rng_seed",
        },
        "scenario",
    )
    kwargs: dict = {"n_patients": int(section["n_patients"])}
    if "fraction_ventilated" in section:
        kwargs["fraction_ventilated"] = float(section["fraction_ventilated"])
    if "infection_rates" in section:
        kwargs["infection_rates"] = {
            str(k): float(v)
            for k, v in _as_mapping(section["infection_rates"], "scenario.infection_rates").items()
        }
    if "los_distribution" in section:
        los = _as_mapping(section["los_distribution"], "scenario.los_distribution")
        _require_keys(los, {"case", "control"}, "scenario.los_distribution")
        parsed = {}
        for cls, params in los.items():
            params = _as_mapping(params, f"scenario.los_distribution.{cls}")
            _require_keys(params, {"median_hours", "sigma_log"}, f"scenario.los_distribution.{cls}")
            parsed[cls] = LogNormalLOS(float(params["median_hours"]), float(params["sigma_log"]))
        kwargs["los_distribution"] = parsed
    if "feature_effect_sizes" in section:
        kwargs["feature_effect_sizes"] = {
            str(k): float(v)
            for k, v in _as_mapping(
                section["feature_effect_sizes"], "scenario.feature_effect_sizes"
            ).items()
        }
    if section.get("ventilated_effect_sizes") is not None:
        kwargs["ventilated_effect_sizes"] = {
            str(k): float(v)
            for k, v in _as_mapping(
                section["ventilated_effect_sizes"], "scenario.ventilated_effect_sizes"
            ).items()
        }
    if "missingness_rates" in section:
        kwargs["missingness_rates"] = _class_rates(
            _as_mapping(section["missingness_rates"], "scenario.missingness_rates"),
            "scenario.missingness_rates",
        )
    if section.get("ventilated_missingness_rates") is not None:
        kwargs["ventilated_missingness_rates"] = _class_rates(
            _as_mapping(
                section["ventilated_missingness_rates"], "scenario.ventilated_missingness_rates"
            ),
            "scenario.ventilated_missingness_rates",
        )
    if "missingness_correlation" in section:
        kwargs["missingness_correlation"] = float(section["missingness_correlation"])
    if "noise" in section:
        noise = _as_mapping(section["noise"], "scenario.noise")
        allowed = {
            "prophylactic_rate",
            "late_workup_rate",
            "early_workup_rate",
            "cap_code_rate",
            "benign_code_rate",
            "non_antibiotic_rate",
            "missing_code_rate",
        }
        _require_keys(noise, allowed, "scenario.noise")
        kwargs["noise"] = NoiseRates(**{k: float(v) for k, v in noise.items()})
    if "multi_stay_rate" in section:
        kwargs["multi_stay_rate"] = float(section["multi_stay_rate"])
    if "rng_seed" in section:
        kwargs["rng_seed"] = int(section["rng_seed"])
    return ScenarioConfig(**kwargs)


def parse_catalog(raw: Optional[Sequence]) -> tuple[FeatureSpec, ...]:
    if raw is None:
        return DEFAULT_CATALOG
    specs = []
    for i, entry in enumerate(raw):
        entry = _as_mapping(entry, f"features.catalog[{i}]")
        _require_keys(entry, {"name", "channel", "unit", "lower", "upper"}, f"features.catalog[{i}]")
        specs.append(
            FeatureSpec(
                name=str(entry["name"]),
                channel=str(entry["channel"]),
                unit=str(entry.get("unit", "")),
                lower=float(entry["lower"]) if entry.get("lower") is not None else None,
                upper=float(entry["upper"]) if entry.get("upper") is not None else None,
            )
        )
    return tuple(specs)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    output_dir: Path
    scenario: ScenarioConfig
    label_params: LabelParams
    catalog: tuple[FeatureSpec, ...]
    window_policy: WindowPolicy
    gap_hours: float
    los_bin_hours: float
    anchor_feature: str
    balance_epsilon: float
    balance_test_set: bool
    train_fraction: float
    validation_fraction: float
    n_repeats: int
    grid: HyperparameterGrid
    rows: tuple[tuple[str, str], ...]
    raw: dict = field(repr=False, default_factory=dict)

    def plan_for_row(self, row: int) -> ExperimentPlan:
        if not 0 <= row < len(self.rows):
            raise ConfigError(f"row {row} out of range; config defines {len(self.rows)} rows")
        target, strategy = self.rows[row]
        return ExperimentPlan(
            model_target=target,
            missingness_strategy=strategy,
            n_repeats=self.n_repeats,
            base_seed=self.seed,
            label_params=self.label_params,
            window_policy=self.window_policy,
            catalog=self.catalog,
            gap_hours=self.gap_hours,
            grid=self.grid,
            los_bin_hours=self.los_bin_hours,
            anchor_feature=self.anchor_feature,
            balance_epsilon=self.balance_epsilon,
            balance_test_set=self.balance_test_set,
            train_fraction=self.train_fraction,
            validation_fraction=self.validation_fraction,
        )


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    raw = _as_mapping(raw, "config")
    _require_keys(
        raw,
        {"seed", "output_dir", "scenario", "labeling", "features", "cohort", "learner", "experiment"},
        "config",
    )
    for required in ("scenario", "output_dir"):
        if required not in raw:
            raise ConfigError(f"config is missing required section {required!r}")

    labeling = _as_mapping(raw.get("labeling"), "labeling")
    _require_keys(labeling, {"contiguity_window_hours", "novelty_lookback_hours"}, "labeling")
    label_params = LabelParams(
        contiguity_window_hours=float(labeling.get("contiguity_window_hours", 24.0)),
        novelty_lookback_hours=float(labeling.get("novelty_lookback_hours", 48.0)),
    )

    features = _as_mapping(raw.get("features"), "features")
    _require_keys(
        features,
        {"catalog", "observation_hours", "validity_hours", "prediction_gap_hours"},
        "features",
    )
    policy_kwargs = {}
    if "observation_hours" in features:
        policy_kwargs["observation_hours"] = {
            str(k): float(v)
            for k, v in _as_mapping(features["observation_hours"], "features.observation_hours").items()
        }
    if "validity_hours" in features:
        policy_kwargs["validity_hours"] = {
            str(k): float(v)
            for k, v in _as_mapping(features["validity_hours"], "features.validity_hours").items()
        }
    window_policy = WindowPolicy(**policy_kwargs)
    catalog = parse_catalog(features.get("catalog"))
    gap_hours = float(features.get("prediction_gap_hours", 24.0))

    cohort = _as_mapping(raw.get("cohort"), "cohort")
    _require_keys(
        cohort,
        {
            "los_bin_hours",
            "anchor_feature",
            "balance_epsilon",
            "train_fraction",
            "validation_fraction",
            "n_repeats",
        },
        "cohort",
    )

    learner = _as_mapping(raw.get("learner"), "learner")
    _require_keys(learner, {"grid"}, "learner")
    grid_section = _as_mapping(learner.get("grid"), "learner.grid")
    _require_keys(
        grid_section,
        {"max_depth", "n_rounds", "learning_rate", "l2_reg", "min_split_gain", "min_child_weight"},
        "learner.grid",
    )
    grid_kwargs = {}
    for name, caster in (
        ("max_depth", int),
        ("n_rounds", int),
        ("learning_rate", float),
        ("l2_reg", float),
        ("min_split_gain", float),
        ("min_child_weight", float),
    ):
        if name in grid_section:
            values = grid_section[name]
            if not isinstance(values, (list, tuple)):
                raise ConfigError(f"learner.grid.{name} must be a list")
            grid_kwargs[name] = tuple(caster(v) for v in values)
    grid = HyperparameterGrid(**grid_kwargs)

    experiment = _as_mapping(raw.get("experiment"), "experiment")
    _require_keys(experiment, {"rows", "balance_test_set"}, "experiment")
    rows_raw = experiment.get(
        "rows",
        [
            {"model_target": "IRI", "missingness_strategy": "gaussian_impute"},
            {"model_target": "IRI", "missingness_strategy": "balance_missingness"},
            {"model_target": "VAP", "missingness_strategy": "gaussian_impute"},
            {"model_target": "VAP", "missingness_strategy": "balance_missingness"},
        ],
    )
    rows = []
    for i, row in enumerate(rows_raw):
        row = _as_mapping(row, f"experiment.rows[{i}]")
        _require_keys(row, {"model_target", "missingness_strategy"}, f"experiment.rows[{i}]")
        target = str(row["model_target"])
        strategy = str(row["missingness_strategy"])
        if target not in ("IRI", "VAP"):
            raise ConfigError(f"experiment.rows[{i}].model_target must be IRI or VAP")
        if strategy not in STRATEGIES:
            raise ConfigError(
                f"experiment.rows[{i}].missingness_strategy must be one of {STRATEGIES}"
            )
        rows.append((target, strategy))

    return PipelineConfig(
        seed=int(raw.get("seed", 0)),
        output_dir=Path(str(raw["output_dir"])),
        scenario=parse_scenario(raw["scenario"]),
        label_params=label_params,
        catalog=catalog,
        window_policy=window_policy,
        gap_hours=gap_hours,
        los_bin_hours=float(cohort.get("los_bin_hours", 24.0)),
        anchor_feature=str(cohort.get("anchor_feature", "temperature")),
        balance_epsilon=float(cohort.get("balance_epsilon", 0.01)),
        balance_test_set=bool(experiment.get("balance_test_set", False)),
        train_fraction=float(cohort.get("train_fraction", 0.8)),
        validation_fraction=float(cohort.get("validation_fraction", 0.2)),
        n_repeats=int(cohort.get("n_repeats", 5)),
        grid=grid,
        rows=tuple(rows),
        raw=dict(raw),
    )
