"""Synthetic ICU population generator with planted infections.

Produces a ValidatedDataset plus the ground truth of what was planted, so
labeling, cohort construction, and the bias experiments can all be checked
against known answers without any credentialed data.

Key generation behaviors:

* infections are planted at least 48h after admission (and 48h after
  intubation for VAP) with an antibiotic + culture pair around the onset,
  so the labeling rules can recover them;
* infected stays shift the configured features upward starting a signal
  lead (default 48h) before the planted onset, so a predictor reading a
  24h-gapped observation window sees shifted values;
* missingness is planted per stay and feature with class-specific rates;
  a shared per-stay draw correlates suppression across features, which is
  what makes anchored balancing carry over to the other features;
* everything is driven by per-stay RNG substreams spawned from the scenario
  seed, so identical configs give byte-identical datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .ehr import (
    ClinicalEvent,
    CultureEvent,
    DiagnosisCode,
    MedicationEvent,
    PatientStay,
    ValidatedDataset,
    validate_dataset,
)

MINUTES_PER_DAY = 1440
HOUR = 60

#: name, channel, unit, sampling period (minutes), baseline, sd, ventilated-only
GEN_FEATURES: tuple[tuple[str, str, str, int, float, float, bool], ...] = (
    ("temperature", "vital", "degC", 120, 37.0, 0.4, False),
    ("heart_rate", "vital", "bpm", 120, 82.0, 12.0, False),
    ("resp_rate", "vital", "per_min", 120, 16.0, 3.0, False),
    ("spo2", "vital", "pct", 120, 96.5, 1.8, False),
    ("wbc", "lab", "1e9_per_L", 1440, 7.5, 2.2, False),
    ("lactate", "lab", "mmol_per_L", 1440, 1.3, 0.5, False),
    ("fio2", "vent_setting", "fraction", 240, 0.45, 0.08, True),
    ("peep", "vent_setting", "cmH2O", 240, 6.0, 1.5, True),
    ("vae_score", "vae", "score", 1440, 1.0, 0.8, True),
)

#: (lower, upper) clamps keeping generated values physical.
VALUE_CLAMPS = {
    "temperature": (34.0, 42.0),
    "heart_rate": (25.0, 220.0),
    "resp_rate": (4.0, 60.0),
    "spo2": (60.0, 100.0),
    "wbc": (0.5, 60.0),
    "lactate": (0.1, 20.0),
    "fio2": (0.21, 1.0),
    "peep": (0.0, 24.0),
    "vae_score": (0.0, 10.0),
}

PLANT_ANTIBIOTICS = ("vancomycin", "cefepime", "meropenem", "piperacillin_tazobactam", "levofloxacin")
PROPHYLAXIS_DRUG = "cefazolin"
LATE_WORKUP_DRUG = "amoxicillin"
EARLY_WORKUP_DRUG = "ampicillin"
NON_ANTIBIOTIC_DRUGS = ("insulin", "propofol")

DEFAULT_INFECTION_RATES = {"VAP": 0.35, "CLABSI": 0.06, "CAUTI": 0.04, "SSI": 0.03, "HAP": 0.04, "CDI": 0.03}
DEFAULT_EFFECT_SIZES = {"temperature": 1.5, "heart_rate": 1.2, "resp_rate": 0.8, "wbc": 1.8, "lactate": 1.0}

#: Margin between the earliest admissible onset and discharge for case stays.
CASE_LOS_MARGIN_MINUTES = 6 * HOUR


@dataclass(frozen=True)
class LogNormalLOS:
    """Length-of-stay model: los_hours = median * exp(sigma_log * Z)."""

    median_hours: float
    sigma_log: float


@dataclass(frozen=True)
class NoiseRates:
    """Per-stay probabilities of benign clinical activity."""

    prophylactic_rate: float = 0.20
    late_workup_rate: float = 0.04
    early_workup_rate: float = 0.03
    cap_code_rate: float = 0.05
    benign_code_rate: float = 0.10
    non_antibiotic_rate: float = 0.30
    missing_code_rate: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    n_patients: int
    fraction_ventilated: float = 0.30
    infection_rates: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_INFECTION_RATES))
    los_distribution: Mapping[str, LogNormalLOS] = field(
        default_factory=lambda: {
            "case": LogNormalLOS(130.0, 0.35),
            "control": LogNormalLOS(70.0, 0.50),
        }
    )
    feature_effect_sizes: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_EFFECT_SIZES))
    #: overrides feature_effect_sizes on ventilated stays when provided
    ventilated_effect_sizes: Optional[Mapping[str, float]] = None
    #: feature -> {"case": rate, "control": rate}; whole-feature suppression per stay
    missingness_rates: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    #: overrides missingness_rates on ventilated stays when provided
    ventilated_missingness_rates: Optional[Mapping[str, Mapping[str, float]]] = None
    missingness_correlation: float = 0.9
    noise: NoiseRates = field(default_factory=NoiseRates)
    multi_stay_rate: float = 0.08
    #: infected-class feature shifts begin this long before the planted onset,
    #: so a 24h-gap predictor has a full observation window of shifted values
    signal_lead_hours: float = 48.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_patients <= 0:
            raise ValueError("n_patients must be positive")
        probs = [self.fraction_ventilated, self.missingness_correlation, self.multi_stay_rate]
        probs += list(self.infection_rates.values())
        for by_class in self.missingness_rates.values():
            probs += list(by_class.values())
        if self.ventilated_missingness_rates:
            for by_class in self.ventilated_missingness_rates.values():
                probs += list(by_class.values())
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if sum(self.infection_rates.values()) > 1.0:
            raise ValueError("infection rates must sum to at most 1")
        effect_maps = [self.feature_effect_sizes]
        if self.ventilated_effect_sizes is not None:
            effect_maps.append(self.ventilated_effect_sizes)
        for effects in effect_maps:
            for size in effects.values():
                if not np.isfinite(size):
                    raise ValueError("effect sizes must be finite")


@dataclass(frozen=True)
class PlantedInfection:
    stay_id: str
    category: str
    onset_time: int
    coded: bool


@dataclass(frozen=True)
class GroundTruth:
    """What the generator actually planted, keyed by stay_id."""

    plants: Mapping[str, PlantedInfection]
    suppressed_features: Mapping[str, tuple[str, ...]]

    def is_case(self, stay_id: str) -> bool:
        return stay_id in self.plants

    def case_stay_ids(self) -> set[str]:
        return set(self.plants)


def _draw_category(rng: np.random.Generator, rates: Mapping[str, float], ventilated: bool) -> Optional[str]:
    u = rng.random()
    cum = 0.0
    for category in sorted(rates):
        if category == "VAP" and not ventilated:
            continue
        cum += rates[category]
        if u < cum:
            return category
    return None


def _draw_los_minutes(
    rng: np.random.Generator, dist: LogNormalLOS, minimum_minutes: int
) -> int:
    for _ in range(200):
        los_h = dist.median_hours * float(np.exp(dist.sigma_log * rng.standard_normal()))
        los = int(round(los_h * HOUR))
        if los >= minimum_minutes:
            return los
    return minimum_minutes + 12 * HOUR


def _suppressed_features(
    rng: np.random.Generator,
    rates: Mapping[str, Mapping[str, float]],
    class_name: str,
    correlation: float,
) -> set[str]:
    shared = rng.random()
    out = set()
    for feature in sorted(rates):
        u = shared if rng.random() < correlation else rng.random()
        if u < rates[feature].get(class_name, 0.0):
            out.add(feature)
    return out


def _clamp(feature: str, value: float) -> float:
    lo, hi = VALUE_CLAMPS[feature]
    return min(max(value, lo), hi)


def generate_population(config: ScenarioConfig) -> tuple[ValidatedDataset, GroundTruth]:
    """Generate a population; the result always validates with zero rejections."""
    children = np.random.SeedSequence(config.rng_seed).spawn(config.n_patients)

    stays: list[PatientStay] = []
    clinical: list[ClinicalEvent] = []
    meds: list[MedicationEvent] = []
    cultures: list[CultureEvent] = []
    diagnoses: list[DiagnosisCode] = []
    plants: dict[str, PlantedInfection] = {}
    suppressed_by_stay: dict[str, tuple[str, ...]] = {}

    patient_counter = 0
    previous_patient: Optional[str] = None

    for index in range(config.n_patients):
        rng = np.random.default_rng(children[index])
        stay_id = f"S{index:05d}"

        if previous_patient is not None and rng.random() < config.multi_stay_rate:
            patient_id = previous_patient
        else:
            patient_counter += 1
            patient_id = f"P{patient_counter:05d}"
        previous_patient = patient_id

        age = int(rng.integers(16, 91))
        admit = index * MINUTES_PER_DAY + int(rng.integers(0, 720))
        ventilated = bool(rng.random() < config.fraction_ventilated)
        intubation_offset = int(rng.integers(0, 6 * HOUR + 1)) if ventilated else None

        category = _draw_category(rng, config.infection_rates, ventilated)
        class_name = "case" if category else "control"

        onset_floor = 48 * HOUR
        if category == "VAP":
            onset_floor = intubation_offset + 48 * HOUR
        minimum_los = (onset_floor + CASE_LOS_MARGIN_MINUTES) if category else 1
        los = _draw_los_minutes(rng, config.los_distribution[class_name], minimum_los)
        discharge = admit + los

        stays.append(
            PatientStay(
                stay_id=stay_id,
                patient_id=patient_id,
                age_years=age,
                icu_admit_time=admit,
                discharge_time=discharge,
                intubation_time=(admit + intubation_offset) if ventilated else None,
                mechanically_ventilated=ventilated,
            )
        )

        onset: Optional[int] = None
        if category:
            onset_rel = int(rng.integers(onset_floor + HOUR, los - 2 * HOUR + 1))
            onset = admit + onset_rel

        rate_map = config.missingness_rates
        if ventilated and config.ventilated_missingness_rates is not None:
            rate_map = config.ventilated_missingness_rates
        effect_map = config.feature_effect_sizes
        if ventilated and config.ventilated_effect_sizes is not None:
            effect_map = config.ventilated_effect_sizes
        suppressed = _suppressed_features(rng, rate_map, class_name, config.missingness_correlation)
        suppressed_by_stay[stay_id] = tuple(sorted(suppressed))

        # measurement streams
        for name, channel, unit, period, baseline, sd, vent_only in GEN_FEATURES:
            if vent_only and not ventilated:
                continue
            if name in suppressed:
                continue
            start = admit
            if vent_only:
                start = admit + intubation_offset
            signal_lead = int(round(config.signal_lead_hours * HOUR))
            t = start + period
            while t <= discharge:
                jitter = int(rng.integers(0, period // 4 + 1))
                when = min(t + jitter, discharge)
                value = baseline + sd * float(rng.standard_normal())
                if onset is not None and when >= onset - signal_lead:
                    value += effect_map.get(name, 0.0) * sd
                clinical.append(
                    ClinicalEvent(stay_id, when, channel, name, _clamp(name, value), unit)
                )
                t += period

        # planted infection: antibiotic course + culture + (usually) a code
        if category:
            drug = str(rng.choice(PLANT_ANTIBIOTICS))
            delta = int(rng.integers(30, 6 * HOUR + 1))
            # the later element of the pair clamps to discharge; the earlier
            # one stays at onset so min(abx, culture order) recovers it
            if rng.random() < 0.5:
                abx_time, order_time = onset, min(onset + delta, discharge)
            else:
                order_time, abx_time = onset, min(onset + delta, discharge)
            dose = abx_time
            while dose <= discharge:
                meds.append(MedicationEvent(stay_id, dose, drug, True, False))
                dose += 12 * HOUR
            result_time = order_time + int(rng.integers(12 * HOUR, 36 * HOUR + 1))
            cultures.append(CultureEvent(stay_id, order_time, result_time, True))
            coded = True
            if category == "VAP" and rng.random() < config.noise.missing_code_rate:
                coded = False
            if coded:
                diagnoses.append(DiagnosisCode(stay_id, f"HAI-{category}", True, False, category))
            plants[stay_id] = PlantedInfection(stay_id, category, onset, coded)

        # benign noise streams
        noise = config.noise
        if rng.random() < noise.prophylactic_rate:
            dose = admit + int(rng.integers(HOUR, 24 * HOUR + 1))
            for _ in range(3):
                if dose > discharge:
                    break
                meds.append(MedicationEvent(stay_id, dose, PROPHYLAXIS_DRUG, True, True))
                dose += 8 * HOUR
        if rng.random() < noise.late_workup_rate and los > 52 * HOUR:
            t_n = admit + int(rng.integers(49 * HOUR, los - 2 * HOUR + 1))
            order = min(t_n + int(rng.integers(0, 4 * HOUR + 1)), discharge)
            cultures.append(
                CultureEvent(stay_id, order, order + int(rng.integers(12 * HOUR, 36 * HOUR + 1)), False)
            )
            if rng.random() < 0.5:
                meds.append(MedicationEvent(stay_id, t_n, LATE_WORKUP_DRUG, True, False))
        if rng.random() < noise.early_workup_rate:
            t_e = admit + int(rng.integers(HOUR, 47 * HOUR))
            if t_e <= discharge:
                meds.append(MedicationEvent(stay_id, t_e, EARLY_WORKUP_DRUG, True, False))
                order = min(t_e + int(rng.integers(0, 2 * HOUR + 1)), discharge)
                cultures.append(
                    CultureEvent(stay_id, order, order + int(rng.integers(12 * HOUR, 36 * HOUR + 1)), False)
                )
        if rng.random() < noise.cap_code_rate and not category:
            diagnoses.append(DiagnosisCode(stay_id, "CAP", False, True, None))
        if rng.random() < noise.benign_code_rate:
            diagnoses.append(DiagnosisCode(stay_id, f"DX-{int(rng.integers(100, 1000))}", False, False, None))
        if rng.random() < noise.non_antibiotic_rate:
            drug = str(rng.choice(NON_ANTIBIOTIC_DRUGS))
            when = admit + int(rng.integers(HOUR, max(los - HOUR, HOUR) + 1))
            meds.append(MedicationEvent(stay_id, min(when, discharge), drug, False, False))

    dataset = validate_dataset(stays, clinical, meds, cultures, diagnoses)
    if dataset.total_rejections:
        raise AssertionError(f"generator emitted invalid records: {dataset.rejections}")
    truth = GroundTruth(plants=plants, suppressed_features=suppressed_by_stay)
    return dataset, truth


def plant_missingness_bias(
    dataset: ValidatedDataset,
    rates: Mapping[str, Mapping[str, float]],
    case_stay_ids: set[str],
    seed: int,
) -> ValidatedDataset:
    """Delete events of the named features independently with class-specific rates.

    rates maps feature -> {"case": p, "control": p}. Stays in case_stay_ids
    use the case rate. Features not present anywhere in the dataset are
    rejected as configuration errors.
    """
    observed = {ev.feature_name for ev in dataset.clinical_events}
    unknown = sorted(set(rates) - observed)
    if unknown:
        raise ValueError(f"unknown feature names in missingness rates: {unknown}")

    rng = np.random.default_rng(seed)
    kept = []
    for ev in dataset.clinical_events:
        by_class = rates.get(ev.feature_name)
        if by_class is None:
            kept.append(ev)
            continue
        cls = "case" if ev.stay_id in case_stay_ids else "control"
        rate = by_class.get(cls, 0.0)
        if rng.random() >= rate:
            kept.append(ev)
    return replace(dataset, clinical_events=tuple(kept))
