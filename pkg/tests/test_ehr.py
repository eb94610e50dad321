import math

import pytest

from haipred.ehr import (
    ClinicalEvent,
    CultureEvent,
    DatasetError,
    DiagnosisCode,
    MedicationEvent,
    PatientStay,
    ReferenceRange,
    revalidate,
    validate_dataset,
)

HOUR = 60


def make_stay(stay_id="S1", admit=0, los_hours=100, **kwargs):
    defaults = dict(
        patient_id=f"P_{stay_id}",
        age_years=60,
        icu_admit_time=admit,
        discharge_time=admit + los_hours * HOUR,
    )
    defaults.update(kwargs)
    return PatientStay(stay_id=stay_id, **defaults)


def test_all_valid_inputs_have_zero_rejections():
    stays = [make_stay("S1"), make_stay("S2", admit=500)]
    events = [
        ClinicalEvent("S1", t * HOUR, "vital", "temperature", 37.0, "degC") for t in range(1, 11)
    ]
    ds = validate_dataset(stays, events)
    assert ds.total_rejections == 0
    assert len(ds.stays) == 2
    assert len(ds.clinical_events) == 10


def test_event_after_discharge_is_dropped_and_counted():
    stay = make_stay("S1", los_hours=10)
    late = ClinicalEvent("S1", 11 * HOUR, "vital", "temperature", 37.0)
    ds = validate_dataset([stay], [late])
    assert ds.rejections == {"out_of_stay": 1}
    assert len(ds.clinical_events) == 0


@pytest.mark.parametrize(
    "records,expect",
    [
        # each single-field violation lands in its own category
        (
            {"cultures": [CultureEvent("S1", 5 * HOUR, None, True)]},
            {"inconsistent_culture": 1},
        ),
        (
            {"cultures": [CultureEvent("S1", 5 * HOUR, 4 * HOUR, True)]},
            {"inconsistent_culture": 1},
        ),
        (
            {"clinical": [ClinicalEvent("S1", 5 * HOUR, "vital", "temperature", math.nan)]},
            {"nonfinite_value": 1},
        ),
        (
            {"clinical": [ClinicalEvent("S1", 5 * HOUR, "telemetry", "temperature", 37.0)]},
            {"bad_channel": 1},
        ),
        (
            {"clinical": [ClinicalEvent("S9", 5 * HOUR, "vital", "temperature", 37.0)]},
            {"orphan_event": 1},
        ),
        (
            {"meds": [MedicationEvent("S1", 5 * HOUR, "cefazolin", False, True)]},
            {"inconsistent_medication": 1},
        ),
        (
            {"diagnoses": [DiagnosisCode("S1", "X", True, True, "VAP")]},
            {"inconsistent_diagnosis": 1},
        ),
        (
            {"diagnoses": [DiagnosisCode("S1", "X", True, False, None)]},
            {"inconsistent_diagnosis": 1},
        ),
    ],
)
def test_each_single_field_violation_is_caught(records, expect):
    ds = validate_dataset(
        [make_stay("S1")],
        records.get("clinical", []),
        records.get("meds", []),
        records.get("cultures", []),
        records.get("diagnoses", []),
    )
    assert dict(ds.rejections) == expect


def test_invalid_stays_rejected():
    bad_order = make_stay("S1", los_hours=0)
    with_intubation = make_stay(
        "S2", intubation_time=5 * HOUR, mechanically_ventilated=False
    )
    ds = validate_dataset([bad_order, with_intubation])
    assert ds.rejections == {"bad_stay": 1, "inconsistent_intubation": 1}
    assert len(ds.stays) == 0


def test_duplicate_stay_id_raises():
    with pytest.raises(DatasetError):
        validate_dataset([make_stay("S1"), make_stay("S1")])


def test_unsorted_input_is_sorted_not_rejected():
    stay = make_stay("S1")
    events = [
        ClinicalEvent("S1", 9 * HOUR, "vital", "temperature", 37.5),
        ClinicalEvent("S1", 3 * HOUR, "vital", "temperature", 36.9),
        ClinicalEvent("S1", 3 * HOUR, "lab", "wbc", 7.0),
    ]
    ds = validate_dataset([stay], events)
    assert ds.total_rejections == 0
    times = [(e.time, e.channel) for e in ds.clinical_events]
    assert times == [(3 * HOUR, "lab"), (3 * HOUR, "vital"), (9 * HOUR, "vital")]


def test_validation_is_idempotent(default_population):
    dataset, _ = default_population
    again = revalidate(dataset)
    assert again.total_rejections == 0
    assert again.stays == dataset.stays
    assert again.clinical_events == dataset.clinical_events


def test_total_order_within_stay(default_population):
    dataset, _ = default_population
    for stay in dataset.stays[:20]:
        events = dataset.clinical_for(stay.stay_id)
        keys = [(e.time, e.channel, e.feature_name) for e in events]
        assert keys == sorted(keys)


def test_reference_range_requires_upper_above_lower():
    with pytest.raises(ValueError):
        ReferenceRange("temperature", 38.0, 36.0)


def test_los_hours_derived():
    stay = make_stay("S1", admit=120, los_hours=36)
    assert stay.los_hours == 36.0
