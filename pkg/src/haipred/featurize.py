"""Windowed featurization: one sample per stay at a gapped prediction time.

Prediction schema shared by both models: one-shot sampling with a 24h
prediction gap, channel-specific observation windows, and a carry-forward
lookback immediately before the window. Interval conventions are fixed so
boundaries are exactly testable:

* observation window:   (t - W,     t]        (most recent wins)
* carry-forward window: [t - W - V, t - W]    (used only when the
                                               observation window is empty)

No event after the prediction time is ever read.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .ehr import (
    ClinicalEvent,
    PatientStay,
    ReferenceRange,
    ValidatedDataset,
    hours_to_minutes,
)
from .labeling import EXCLUDED, NEGATIVE, POSITIVE, LabelRecord, label_value

#: Channel tag for features computed from other features rather than events.
DERIVED = "derived"

GAP_HOURS_DEFAULT = 24.0

#: Controls are sampled no earlier than this many minutes after admission,
#: mirroring the 48h nosocomial clock that governs positive onsets.
CONTROL_SPAN_START_MINUTES = 48 * 60


@dataclass(frozen=True)
class FeatureSpec:
    """Catalog entry: where a feature comes from and its normal range."""

    name: str
    channel: str
    unit: str = ""
    lower: Optional[float] = None
    upper: Optional[float] = None

    def reference_range(self) -> Optional[ReferenceRange]:
        if self.lower is None or self.upper is None:
            return None
        return ReferenceRange(self.name, self.lower, self.upper, self.unit)


#: Default catalog: raw channel features plus the two derived features.
DEFAULT_CATALOG: tuple[FeatureSpec, ...] = (
    FeatureSpec("temperature", "vital", "degC", 36.0, 38.0),
    FeatureSpec("heart_rate", "vital", "bpm", 60.0, 100.0),
    FeatureSpec("resp_rate", "vital", "per_min", 12.0, 20.0),
    FeatureSpec("spo2", "vital", "pct", 92.0, 100.0),
    FeatureSpec("wbc", "lab", "1e9_per_L", 4.0, 11.0),
    FeatureSpec("lactate", "lab", "mmol_per_L", 0.5, 2.0),
    FeatureSpec("fio2", "vent_setting", "fraction", 0.21, 0.6),
    FeatureSpec("peep", "vent_setting", "cmH2O", 4.0, 10.0),
    FeatureSpec("vae_score", "vae", "score", 0.0, 3.0),
    FeatureSpec("SpO2FiO2Ratio", DERIVED, "ratio", 235.0, 476.0),
    FeatureSpec("mv_hrs", DERIVED, "hours", 0.0, 336.0),
)


@dataclass(frozen=True)
class WindowPolicy:
    """Per-channel observation windows and carry-forward validity, in hours."""

    observation_hours: Mapping[str, float] = field(
        default_factory=lambda: {"vital": 12.0, "vent_setting": 24.0, "vae": 24.0, "lab": 24.0}
    )
    validity_hours: Mapping[str, float] = field(
        default_factory=lambda: {"vital": 2.0, "vent_setting": 2.0, "vae": 2.0, "lab": 26.0}
    )

    def __post_init__(self) -> None:
        for mapping in (self.observation_hours, self.validity_hours):
            for channel, hours in mapping.items():
                if hours <= 0:
                    raise ValueError(f"window hours for {channel} must be positive")

    def observation_minutes(self, channel: str) -> int:
        return hours_to_minutes(self.observation_hours[channel])

    def validity_minutes(self, channel: str) -> int:
        return hours_to_minutes(self.validity_hours[channel])


@dataclass(frozen=True)
class FeatureVector:
    """One sample: feature values and their missingness mask at one time.

    missing_mask keeps the as-extracted missingness even after imputation
    fills values, so downstream balancing and audits still see it.
    """

    sample_id: str
    stay_id: str
    prediction_time: int
    values: Mapping[str, Optional[float]]
    missing_mask: Mapping[str, bool]
    label_iri: Optional[bool] = None
    label_vap: Optional[bool] = None

    def label(self, target: str) -> Optional[bool]:
        if target == "IRI":
            return self.label_iri
        if target == "VAP":
            return self.label_vap
        raise ValueError(f"unknown label target {target!r}")


def stable_stream_id(*parts) -> int:
    """Stable 32-bit id for per-sample RNG substreams (never Python's hash)."""
    text = "\x1f".join(str(p) for p in parts)
    return zlib.crc32(text.encode("utf-8"))


def sample_one_shot(
    stay: PatientStay,
    label_record: LabelRecord,
    target: str,
    gap_hours: float = GAP_HOURS_DEFAULT,
    rng: Optional[np.random.Generator] = None,
) -> Optional[int]:
    """Pick the stay's single prediction time, or None when none is valid.

    Positive stays anchor at onset minus the gap. Controls draw uniformly
    (seeded) from [admit + 48h, discharge - gap]; stays too short to host
    that span are skipped.
    """
    gap = hours_to_minutes(gap_hours)
    value = label_value(label_record, target)
    if value is None:
        return None
    if value:
        onset = label_record.iri_onset if target == "IRI" else label_record.vap_onset
        prediction_time = onset - gap
        if prediction_time < stay.icu_admit_time:
            return None
        return prediction_time
    lo = stay.icu_admit_time + CONTROL_SPAN_START_MINUTES
    hi = stay.discharge_time - gap
    if hi < lo:
        return None
    if rng is None:
        rng = np.random.default_rng(0)
    return int(rng.integers(lo, hi + 1))


def extract_feature(
    events: Sequence[ClinicalEvent],
    spec: FeatureSpec,
    prediction_time: int,
    policy: WindowPolicy,
) -> Optional[float]:
    """Most recent value in the observation window, else in the carry-forward
    window, else None. Derived features are not extracted here."""
    if spec.channel == DERIVED:
        raise ValueError(f"{spec.name} is derived, not extracted from events")
    if spec.channel not in policy.observation_hours:
        raise ValueError(f"no window policy for channel {spec.channel!r}")
    w = policy.observation_minutes(spec.channel)
    v = policy.validity_minutes(spec.channel)

    in_window: Optional[ClinicalEvent] = None
    in_lookback: Optional[ClinicalEvent] = None
    for ev in events:
        if ev.feature_name != spec.name or ev.channel != spec.channel:
            continue
        if spec.unit and ev.unit and ev.unit != spec.unit:
            raise ValueError(
                f"unit mismatch for {spec.name}: event has {ev.unit!r}, catalog has {spec.unit!r}"
            )
        if prediction_time - w < ev.time <= prediction_time:
            if in_window is None or ev.time >= in_window.time:
                in_window = ev
        elif prediction_time - w - v <= ev.time <= prediction_time - w:
            if in_lookback is None or ev.time >= in_lookback.time:
                in_lookback = ev
    if in_window is not None:
        return in_window.value
    if in_lookback is not None:
        return in_lookback.value
    return None


def build_feature_vector(
    stay: PatientStay,
    prediction_time: int,
    events: Sequence[ClinicalEvent],
    catalog: Sequence[FeatureSpec] = DEFAULT_CATALOG,
    policy: WindowPolicy = WindowPolicy(),
    label_record: Optional[LabelRecord] = None,
) -> FeatureVector:
    """Assemble one value/mask entry per catalog feature.

    mv_hrs is hours since intubation at the prediction time (absent when the
    stay was not intubated by then). SpO2FiO2Ratio divides the extracted spo2
    by the extracted fio2 when both are present.
    """
    values: dict[str, Optional[float]] = {}
    for spec in catalog:
        if spec.channel == DERIVED:
            continue
        values[spec.name] = extract_feature(events, spec, prediction_time, policy)

    names = {spec.name for spec in catalog}
    if "mv_hrs" in names:
        if stay.intubation_time is not None and stay.intubation_time <= prediction_time:
            values["mv_hrs"] = (prediction_time - stay.intubation_time) / 60.0
        else:
            values["mv_hrs"] = None
    if "SpO2FiO2Ratio" in names:
        spo2 = values.get("spo2")
        fio2 = values.get("fio2")
        if spo2 is not None and fio2 is not None and fio2 > 0:
            values["SpO2FiO2Ratio"] = spo2 / fio2
        else:
            values["SpO2FiO2Ratio"] = None

    ordered = {spec.name: values.get(spec.name) for spec in catalog}
    mask = {name: value is None for name, value in ordered.items()}
    return FeatureVector(
        sample_id=stay.stay_id,
        stay_id=stay.stay_id,
        prediction_time=prediction_time,
        values=ordered,
        missing_mask=mask,
        label_iri=label_value(label_record, "IRI") if label_record else None,
        label_vap=label_value(label_record, "VAP") if label_record else None,
    )


def gaussian_impute(
    fv: FeatureVector,
    ranges: Mapping[str, ReferenceRange],
    rng: np.random.Generator,
) -> FeatureVector:
    """Fill absent values with draws from N((l+u)/2, (0.15*(u-l))^2).

    The missingness mask is preserved so downstream code can still audit
    which entries were imputed; present values are untouched.
    """
    new_values: dict[str, Optional[float]] = {}
    for name, value in fv.values.items():
        if value is not None:
            new_values[name] = value
            continue
        if name not in ranges:
            raise ValueError(f"no reference range for feature {name!r}")
        rr = ranges[name]
        mu = (rr.lower + rr.upper) / 2.0
        sigma = 0.15 * (rr.upper - rr.lower)
        new_values[name] = float(rng.normal(mu, sigma))
    return replace(fv, values=new_values)


def impute_samples(
    samples: Sequence[FeatureVector],
    ranges: Mapping[str, ReferenceRange],
    master_seed: int,
) -> list[FeatureVector]:
    """Impute a batch, one RNG substream per sample so order never matters."""
    out = []
    for fv in samples:
        rng = np.random.default_rng(
            np.random.SeedSequence((master_seed, stable_stream_id(fv.sample_id)))
        )
        out.append(gaussian_impute(fv, ranges, rng))
    return out


def catalog_ranges(catalog: Sequence[FeatureSpec]) -> dict[str, ReferenceRange]:
    """Reference ranges for all catalog features that declare one."""
    out = {}
    for spec in catalog:
        rr = spec.reference_range()
        if rr is not None:
            out[spec.name] = rr
    return out


def missingness_rate(
    samples: Sequence[FeatureVector],
    labels: Sequence[bool],
    feature: str,
    label_class: bool,
) -> float:
    """Fraction of the class's samples whose mask is true for the feature."""
    in_class = [fv for fv, y in zip(samples, labels) if y == label_class]
    if not in_class:
        raise ValueError(f"no samples in class {label_class}")
    return sum(1 for fv in in_class if fv.missing_mask[feature]) / len(in_class)


@dataclass(frozen=True)
class FeaturizeResult:
    samples: list[FeatureVector]
    skipped: Mapping[str, int]


def featurize_stays(
    dataset: ValidatedDataset,
    labels_by_stay: Mapping[str, LabelRecord],
    stay_ids: Iterable[str],
    target: str,
    catalog: Sequence[FeatureSpec] = DEFAULT_CATALOG,
    policy: WindowPolicy = WindowPolicy(),
    gap_hours: float = GAP_HOURS_DEFAULT,
    master_seed: int = 0,
) -> FeaturizeResult:
    """One-shot featurize a set of stays against the chosen label target.

    Control prediction times use per-stay RNG substreams derived from
    master_seed, so results do not depend on iteration order. Stays that
    cannot host a valid prediction time are counted, not errored.
    """
    samples: list[FeatureVector] = []
    skipped: dict[str, int] = {}
    for stay_id in sorted(stay_ids):
        stay = dataset.stay(stay_id)
        record = labels_by_stay[stay_id]
        if label_value(record, target) is None:
            skipped["excluded"] = skipped.get("excluded", 0) + 1
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence((master_seed, stable_stream_id("pred_time", stay_id)))
        )
        t = sample_one_shot(stay, record, target, gap_hours, rng)
        if t is None:
            skipped["no_valid_time"] = skipped.get("no_valid_time", 0) + 1
            continue
        samples.append(
            build_feature_vector(
                stay, t, dataset.clinical_for(stay_id), catalog, policy, record
            )
        )
    return FeaturizeResult(samples=samples, skipped=dict(sorted(skipped.items())))


def feature_order(catalog: Sequence[FeatureSpec]) -> list[str]:
    return [spec.name for spec in catalog]


def to_matrix(samples: Sequence[FeatureVector], order: Sequence[str]) -> np.ndarray:
    """Stack samples into an (n, d) float matrix with NaN for absent values."""
    mat = np.full((len(samples), len(order)), np.nan, dtype=float)
    for i, fv in enumerate(samples):
        for j, name in enumerate(order):
            value = fv.values.get(name)
            if value is not None:
                mat[i, j] = value
    return mat


def labels_vector(samples: Sequence[FeatureVector], target: str) -> np.ndarray:
    out = np.zeros(len(samples), dtype=int)
    for i, fv in enumerate(samples):
        value = fv.label(target)
        if value is None:
            raise ValueError(f"sample {fv.sample_id} has no {target} label")
        out[i] = int(value)
    return out
