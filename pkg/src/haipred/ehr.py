"""Core EHR data model: patient stays, event streams, and dataset validation.

All timestamps are integer minutes since a dataset-local epoch, so window
arithmetic downstream is exact. Units are opaque tags; mismatches are data
errors, never converted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

MINUTES_PER_HOUR = 60

#: Event channels recognized by the pipeline.
CHANNELS = ("vital", "lab", "vent_setting", "vae")

#: Infection categories a diagnosis code may carry.
HAI_CATEGORIES = ("VAP", "CLABSI", "CAUTI", "SSI", "HAP", "CDI")


class DatasetError(ValueError):
    """Raised when a dataset cannot be validated at all (e.g. duplicate stay ids)."""


def hours_to_minutes(hours: float) -> int:
    """Convert hours to integer minutes, rounding to the nearest minute."""
    return int(round(hours * MINUTES_PER_HOUR))


@dataclass(frozen=True)
class PatientStay:
    """One ICU stay. A patient may have several stays (same patient_id)."""

    stay_id: str
    patient_id: str
    age_years: int
    icu_admit_time: int
    discharge_time: int
    intubation_time: Optional[int] = None
    mechanically_ventilated: bool = False

    @property
    def los_hours(self) -> float:
        return (self.discharge_time - self.icu_admit_time) / MINUTES_PER_HOUR


@dataclass(frozen=True)
class ClinicalEvent:
    """A timestamped measurement on one of the four feature channels."""

    stay_id: str
    time: int
    channel: str
    feature_name: str
    value: float
    unit: str = ""


@dataclass(frozen=True)
class MedicationEvent:
    stay_id: str
    start_time: int
    drug_name: str
    is_antibiotic: bool = False
    is_prophylactic: bool = False


@dataclass(frozen=True)
class CultureEvent:
    stay_id: str
    order_time: int
    result_time: Optional[int] = None
    positive: Optional[bool] = None


@dataclass(frozen=True)
class DiagnosisCode:
    stay_id: str
    code: str
    is_hai: bool = False
    is_cap: bool = False
    hai_category: Optional[str] = None


@dataclass(frozen=True)
class ReferenceRange:
    """Normal range (lower, upper) for a feature, in the feature's own unit."""

    feature_name: str
    lower: float
    upper: float
    unit: str = ""

    def __post_init__(self) -> None:
        if not self.upper > self.lower:
            raise ValueError(
                f"reference range for {self.feature_name} needs upper > lower, "
                f"got ({self.lower}, {self.upper})"
            )


def _stay_check(stay: PatientStay) -> Optional[str]:
    """Return a rejection category for an invalid stay, or None."""
    if stay.age_years < 0:
        return "bad_stay"
    if not stay.discharge_time > stay.icu_admit_time:
        return "bad_stay"
    if stay.intubation_time is not None:
        if not stay.mechanically_ventilated:
            return "inconsistent_intubation"
        if not (stay.icu_admit_time <= stay.intubation_time <= stay.discharge_time):
            return "inconsistent_intubation"
    return None


@dataclass(frozen=True)
class ValidatedDataset:
    """Immutable, per-stay-indexed view of a validated event universe.

    Events are totally ordered within a stay: (time, channel, feature_name)
    for clinical events, with analogous orderings for the other streams.
    Construct via validate_dataset; safe to share across threads.
    """

    stays: tuple[PatientStay, ...]
    clinical_events: tuple[ClinicalEvent, ...]
    medications: tuple[MedicationEvent, ...]
    cultures: tuple[CultureEvent, ...]
    diagnoses: tuple[DiagnosisCode, ...]
    rejections: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_stay_index", {s.stay_id: s for s in self.stays})
        object.__setattr__(self, "_clinical_index", None)
        object.__setattr__(self, "_med_index", None)
        object.__setattr__(self, "_culture_index", None)
        object.__setattr__(self, "_dx_index", None)

    @property
    def stays_by_id(self) -> Mapping[str, PatientStay]:
        return self._stay_index  # type: ignore[attr-defined]

    def stay(self, stay_id: str) -> PatientStay:
        return self._stay_index[stay_id]  # type: ignore[attr-defined]

    def _index(self, attr: str, events: Sequence) -> dict:
        cached = getattr(self, attr)
        if cached is None:
            cached = {}
            for ev in events:
                cached.setdefault(ev.stay_id, []).append(ev)
            object.__setattr__(self, attr, cached)
        return cached

    def clinical_for(self, stay_id: str) -> list[ClinicalEvent]:
        return self._index("_clinical_index", self.clinical_events).get(stay_id, [])

    def medications_for(self, stay_id: str) -> list[MedicationEvent]:
        return self._index("_med_index", self.medications).get(stay_id, [])

    def cultures_for(self, stay_id: str) -> list[CultureEvent]:
        return self._index("_culture_index", self.cultures).get(stay_id, [])

    def diagnoses_for(self, stay_id: str) -> list[DiagnosisCode]:
        return self._index("_dx_index", self.diagnoses).get(stay_id, [])

    @property
    def total_rejections(self) -> int:
        return sum(self.rejections.values())


def validate_dataset(
    stays: Iterable[PatientStay],
    clinical_events: Iterable[ClinicalEvent] = (),
    medications: Iterable[MedicationEvent] = (),
    cultures: Iterable[CultureEvent] = (),
    diagnoses: Iterable[DiagnosisCode] = (),
) -> ValidatedDataset:
    """Check every record against the type invariants and index the survivors.

    Invalid records are dropped and counted by violation category; unsorted
    input is sorted, not an error. Duplicate stay ids abort validation with
    DatasetError. Validation is idempotent: re-validating a ValidatedDataset's
    contents yields zero rejections.
    """
    rejections: dict[str, int] = {}

    def reject(category: str) -> None:
        rejections[category] = rejections.get(category, 0) + 1

    kept_stays: list[PatientStay] = []
    seen_ids: set[str] = set()
    for stay in stays:
        if stay.stay_id in seen_ids:
            raise DatasetError(f"duplicate stay_id {stay.stay_id!r}")
        seen_ids.add(stay.stay_id)
        category = _stay_check(stay)
        if category is None:
            kept_stays.append(stay)
        else:
            reject(category)
    kept_stays.sort(key=lambda s: s.stay_id)
    by_id = {s.stay_id: s for s in kept_stays}

    def in_stay(stay_id: str, time: int) -> bool:
        stay = by_id[stay_id]
        return stay.icu_admit_time <= time <= stay.discharge_time

    kept_clinical: list[ClinicalEvent] = []
    for ev in clinical_events:
        if ev.stay_id not in by_id:
            reject("orphan_event")
        elif ev.channel not in CHANNELS:
            reject("bad_channel")
        elif not (isinstance(ev.value, (int, float)) and math.isfinite(ev.value)):
            reject("nonfinite_value")
        elif not in_stay(ev.stay_id, ev.time):
            reject("out_of_stay")
        else:
            kept_clinical.append(ev)
    kept_clinical.sort(key=lambda e: (e.stay_id, e.time, e.channel, e.feature_name))

    kept_meds: list[MedicationEvent] = []
    for med in medications:
        if med.stay_id not in by_id:
            reject("orphan_event")
        elif med.is_prophylactic and not med.is_antibiotic:
            reject("inconsistent_medication")
        elif not in_stay(med.stay_id, med.start_time):
            reject("out_of_stay")
        else:
            kept_meds.append(med)
    kept_meds.sort(key=lambda m: (m.stay_id, m.start_time, m.drug_name))

    kept_cultures: list[CultureEvent] = []
    for cu in cultures:
        has_result = cu.result_time is not None
        if cu.stay_id not in by_id:
            reject("orphan_event")
        elif (cu.positive is not None) != has_result:
            reject("inconsistent_culture")
        elif has_result and cu.result_time < cu.order_time:
            reject("inconsistent_culture")
        elif not in_stay(cu.stay_id, cu.order_time):
            reject("out_of_stay")
        else:
            kept_cultures.append(cu)
    kept_cultures.sort(
        key=lambda c: (c.stay_id, c.order_time, c.result_time if c.result_time is not None else -1)
    )

    kept_dx: list[DiagnosisCode] = []
    for dx in diagnoses:
        if dx.stay_id not in by_id:
            reject("orphan_event")
        elif dx.is_hai and dx.is_cap:
            reject("inconsistent_diagnosis")
        elif dx.is_hai != (dx.hai_category is not None):
            reject("inconsistent_diagnosis")
        elif dx.hai_category is not None and dx.hai_category not in HAI_CATEGORIES:
            reject("inconsistent_diagnosis")
        else:
            kept_dx.append(dx)
    kept_dx.sort(key=lambda d: (d.stay_id, d.code))

    return ValidatedDataset(
        stays=tuple(kept_stays),
        clinical_events=tuple(kept_clinical),
        medications=tuple(kept_meds),
        cultures=tuple(kept_cultures),
        diagnoses=tuple(kept_dx),
        rejections=dict(sorted(rejections.items())),
    )


def revalidate(dataset: ValidatedDataset) -> ValidatedDataset:
    """Run validate_dataset over an already-validated dataset (idempotency check)."""
    return validate_dataset(
        dataset.stays,
        dataset.clinical_events,
        dataset.medications,
        dataset.cultures,
        dataset.diagnoses,
    )
