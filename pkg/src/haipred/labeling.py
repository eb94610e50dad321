"""Infection labeling for both model families.

Two labeling schemes over one stay's event streams:

* clinical-action labels: a new antibiotic temporally contiguous to a culture
  order forms a suspected infection event; suspected events that meet the
  ventilator criteria become VAP-positive labels.
* code-plus-evidence labels: an HAI diagnosis code together with a culture
  order or non-prophylactic antibiotic after the 48h nosocomial floor marks
  an all-HAI (IRI) positive.

Onset time is always min(antibiotic time, culture order time) of the
qualifying event. All rules are pure per stay and order-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .ehr import (
    CultureEvent,
    DiagnosisCode,
    MedicationEvent,
    PatientStay,
    ValidatedDataset,
    hours_to_minutes,
)

POSITIVE = "positive"
NEGATIVE = "negative"
EXCLUDED = "excluded"

#: Nosocomial floor: infections count only from 48h after the clock start
#: (ICU admission for the all-HAI label, intubation for VAP).
HAI_FLOOR_MINUTES = 48 * 60

ADULT_AGE_YEARS = 18


@dataclass(frozen=True)
class LabelParams:
    """Knobs for the clinical-action rules.

    contiguity_window_hours: max |antibiotic - culture order| gap for a pair
    to count as one suspected infection event. novelty_lookback_hours: an
    antibiotic is "new" only if the same drug was not given in this window
    before it.
    """

    contiguity_window_hours: float = 24.0
    novelty_lookback_hours: float = 48.0

    @property
    def contiguity_minutes(self) -> int:
        return hours_to_minutes(self.contiguity_window_hours)

    @property
    def novelty_minutes(self) -> int:
        return hours_to_minutes(self.novelty_lookback_hours)


@dataclass(frozen=True)
class SuspectedInfectionEvent:
    """A (new antibiotic, culture order) pair read as clinical suspicion."""

    stay_id: str
    antibiotic_time: int
    culture_order_time: int
    onset_time: int
    culture_positive: Optional[bool] = None


@dataclass(frozen=True)
class LabelRecord:
    stay_id: str
    iri_label: str
    vap_label: str
    iri_onset: Optional[int] = None
    vap_onset: Optional[int] = None


def _is_new_antibiotic(med: MedicationEvent, meds: Sequence[MedicationEvent], lookback: int) -> bool:
    """True when no earlier dose of the same drug falls in the lookback window."""
    for other in meds:
        if other is med or other.drug_name != med.drug_name:
            continue
        if other.start_time < med.start_time and med.start_time - other.start_time <= lookback:
            return False
    return True


def detect_suspected_infections(
    meds: Sequence[MedicationEvent],
    cultures: Sequence[CultureEvent],
    params: LabelParams = LabelParams(),
    merge: bool = True,
) -> list[SuspectedInfectionEvent]:
    """Pair new non-prophylactic antibiotics with contiguous culture orders.

    Prophylactic antibiotics never count as infection evidence. With
    merge=True (the reported event stream), overlapping pairs whose onsets
    fall within one contiguity window of each other are deduplicated into the
    earliest-onset pair. merge=False returns every qualifying pair, which is
    what the label rules evaluate so that deduplication cannot hide evidence.
    Empty streams give an empty list.
    """
    window = params.contiguity_minutes
    lookback = params.novelty_minutes
    candidates = []
    for med in meds:
        if not med.is_antibiotic or med.is_prophylactic:
            continue
        if not _is_new_antibiotic(med, meds, lookback):
            continue
        for culture in cultures:
            if abs(med.start_time - culture.order_time) <= window:
                onset = min(med.start_time, culture.order_time)
                candidates.append((onset, med.start_time, culture.order_time, culture))
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))

    events: list[SuspectedInfectionEvent] = []
    cluster_start: Optional[int] = None
    for onset, abx_time, order_time, culture in candidates:
        if merge and cluster_start is not None and onset - cluster_start <= window:
            continue
        cluster_start = onset
        events.append(
            SuspectedInfectionEvent(
                stay_id=culture.stay_id,
                antibiotic_time=abx_time,
                culture_order_time=order_time,
                onset_time=onset,
                culture_positive=culture.positive,
            )
        )
    return events


def label_vap(
    stay: PatientStay,
    suspected: Sequence[SuspectedInfectionEvent],
    cultures: Sequence[CultureEvent],
    diagnoses: Sequence[DiagnosisCode],
) -> tuple[str, Optional[int]]:
    """Ventilator-associated pneumonia label for one stay.

    Positive when some suspected event has a positive linked culture, starts
    at least 48h after intubation, and the chart carries no CAP code and no
    HAI code of another category. Stays never intubated are excluded.

    Callers pass the unmerged pair stream (detect merge=False): each pair is
    judged on its own culture, so event deduplication never hides evidence
    and deleting evidence can only lose positives, never create them.
    """
    if stay.intubation_time is None:
        return EXCLUDED, None

    has_cap = any(dx.is_cap for dx in diagnoses)
    has_other_hai = any(dx.is_hai and dx.hai_category != "VAP" for dx in diagnoses)
    if has_cap or has_other_hai:
        return NEGATIVE, None

    floor = stay.intubation_time + HAI_FLOOR_MINUTES
    qualifying = [
        ev for ev in suspected if ev.culture_positive is True and ev.onset_time >= floor
    ]
    if not qualifying:
        return NEGATIVE, None
    return POSITIVE, min(ev.onset_time for ev in qualifying)


def label_iri(
    stay: PatientStay,
    diagnoses: Sequence[DiagnosisCode],
    meds: Sequence[MedicationEvent],
    cultures: Sequence[CultureEvent],
) -> tuple[str, Optional[int]]:
    """All-HAI (infection risk) label for one stay.

    Adults only. Any culture order or non-prophylactic antibiotic in the
    first 48h of ICU admission excludes the stay. Positive needs an HAI
    diagnosis code plus a culture order or non-prophylactic antibiotic at or
    after hour 48; onset is the earliest such evidence time.
    """
    if stay.age_years < ADULT_AGE_YEARS:
        return EXCLUDED, None

    floor = stay.icu_admit_time + HAI_FLOOR_MINUTES
    evidence_times = [c.order_time for c in cultures]
    evidence_times += [
        m.start_time for m in meds if m.is_antibiotic and not m.is_prophylactic
    ]
    if any(t < floor for t in evidence_times):
        return EXCLUDED, None

    has_hai_code = any(dx.is_hai for dx in diagnoses)
    late_evidence = sorted(t for t in evidence_times if t >= floor)
    if has_hai_code and late_evidence:
        return POSITIVE, late_evidence[0]
    return NEGATIVE, None


def label_stay(
    stay: PatientStay,
    meds: Sequence[MedicationEvent],
    cultures: Sequence[CultureEvent],
    diagnoses: Sequence[DiagnosisCode],
    params: LabelParams = LabelParams(),
) -> LabelRecord:
    suspected = detect_suspected_infections(meds, cultures, params, merge=False)
    vap, vap_onset = label_vap(stay, suspected, cultures, diagnoses)
    iri, iri_onset = label_iri(stay, diagnoses, meds, cultures)
    return LabelRecord(
        stay_id=stay.stay_id,
        iri_label=iri,
        vap_label=vap,
        iri_onset=iri_onset,
        vap_onset=vap_onset,
    )


def label_cohort(dataset: ValidatedDataset, params: LabelParams = LabelParams()) -> list[LabelRecord]:
    """One LabelRecord per stay, ordered by stay_id. Deterministic."""
    return [
        label_stay(
            stay,
            dataset.medications_for(stay.stay_id),
            dataset.cultures_for(stay.stay_id),
            dataset.diagnoses_for(stay.stay_id),
            params,
        )
        for stay in dataset.stays
    ]


def cohort_stay_ids(labels: Iterable[LabelRecord], target: str) -> set[str]:
    """Stays usable by a model: not excluded under its label. target is IRI or VAP."""
    if target == "IRI":
        return {r.stay_id for r in labels if r.iri_label != EXCLUDED}
    if target == "VAP":
        return {r.stay_id for r in labels if r.vap_label != EXCLUDED}
    raise ValueError(f"unknown label target {target!r}")


def label_value(record: LabelRecord, target: str) -> Optional[bool]:
    """Boolean label under the chosen target, or None when excluded."""
    if target not in ("IRI", "VAP"):
        raise ValueError(f"unknown label target {target!r}")
    raw = record.iri_label if target == "IRI" else record.vap_label
    if raw == EXCLUDED:
        return None
    return raw == POSITIVE
