"""CSV / JSON-Lines ingestion and persistence for the event universe.

One file per record type; column names are exactly the field names of the
corresponding type. Timestamps are accepted as integer minutes or ISO-8601
strings and are always written back as integer minutes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from .ehr import (
    ClinicalEvent,
    CultureEvent,
    DiagnosisCode,
    MedicationEvent,
    PatientStay,
)


class IngestError(ValueError):
    """Raised for files that cannot be parsed into the documented schema."""


def parse_timestamp(raw: Any) -> int:
    """Parse an integer-minute or ISO-8601 timestamp into epoch minutes."""
    if isinstance(raw, bool):
        raise IngestError(f"not a timestamp: {raw!r}")
    if isinstance(raw, int):
        return raw
    if isinstance(raw, float):
        if raw != int(raw):
            raise IngestError(f"timestamp must be whole minutes: {raw!r}")
        return int(raw)
    text = str(raw).strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise IngestError(f"bad timestamp {raw!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() // 60)


def _parse_bool(raw: Any) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise IngestError(f"bad boolean {raw!r}")


def _opt(raw: Any, parse: Callable[[Any], Any]) -> Optional[Any]:
    if raw is None or raw == "":
        return None
    return parse(raw)


def _rows(path: Path) -> Iterable[dict]:
    if path.suffix == ".jsonl":
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)
    elif path.suffix == ".csv":
        with path.open(encoding="utf-8", newline="") as fh:
            yield from csv.DictReader(fh)
    else:
        raise IngestError(f"unsupported file format: {path.name} (use .csv or .jsonl)")


def read_stays(path: str | Path) -> list[PatientStay]:
    out = []
    for row in _rows(Path(path)):
        out.append(
            PatientStay(
                stay_id=str(row["stay_id"]),
                patient_id=str(row["patient_id"]),
                age_years=int(row["age_years"]),
                icu_admit_time=parse_timestamp(row["icu_admit_time"]),
                discharge_time=parse_timestamp(row["discharge_time"]),
                intubation_time=_opt(row.get("intubation_time"), parse_timestamp),
                mechanically_ventilated=_parse_bool(row.get("mechanically_ventilated", False)),
            )
        )
    return out


def read_clinical_events(path: str | Path) -> list[ClinicalEvent]:
    out = []
    for row in _rows(Path(path)):
        out.append(
            ClinicalEvent(
                stay_id=str(row["stay_id"]),
                time=parse_timestamp(row["time"]),
                channel=str(row["channel"]),
                feature_name=str(row["feature_name"]),
                value=float(row["value"]),
                unit=str(row.get("unit", "") or ""),
            )
        )
    return out


def read_medications(path: str | Path) -> list[MedicationEvent]:
    out = []
    for row in _rows(Path(path)):
        out.append(
            MedicationEvent(
                stay_id=str(row["stay_id"]),
                start_time=parse_timestamp(row["start_time"]),
                drug_name=str(row["drug_name"]),
                is_antibiotic=_parse_bool(row.get("is_antibiotic", False)),
                is_prophylactic=_parse_bool(row.get("is_prophylactic", False)),
            )
        )
    return out


def read_cultures(path: str | Path) -> list[CultureEvent]:
    out = []
    for row in _rows(Path(path)):
        out.append(
            CultureEvent(
                stay_id=str(row["stay_id"]),
                order_time=parse_timestamp(row["order_time"]),
                result_time=_opt(row.get("result_time"), parse_timestamp),
                positive=_opt(row.get("positive"), _parse_bool),
            )
        )
    return out


def read_diagnoses(path: str | Path) -> list[DiagnosisCode]:
    out = []
    for row in _rows(Path(path)):
        category = row.get("hai_category")
        out.append(
            DiagnosisCode(
                stay_id=str(row["stay_id"]),
                code=str(row["code"]),
                is_hai=_parse_bool(row.get("is_hai", False)),
                is_cap=_parse_bool(row.get("is_cap", False)),
                hai_category=str(category) if category not in (None, "") else None,
            )
        )
    return out


def _encode(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return value


def write_records(path: str | Path, records: Sequence, record_type: type) -> None:
    """Write dataclass records as CSV or JSONL depending on the file suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(record_type)]
    if path.suffix == ".jsonl":
        with path.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    elif path.suffix == ".csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            for rec in records:
                row = asdict(rec)
                writer.writerow([_encode(row[n]) for n in names])
    else:
        raise IngestError(f"unsupported file format: {path.name}")


#: filename stem -> (record type, reader)
DATASET_FILES = {
    "stays": (PatientStay, read_stays),
    "clinical_events": (ClinicalEvent, read_clinical_events),
    "medication_events": (MedicationEvent, read_medications),
    "culture_events": (CultureEvent, read_cultures),
    "diagnosis_codes": (DiagnosisCode, read_diagnoses),
}


def write_dataset_files(directory: str | Path, dataset, fmt: str = "csv") -> list[Path]:
    """Persist a ValidatedDataset as one file per record type. Returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    streams = {
        "stays": (dataset.stays, PatientStay),
        "clinical_events": (dataset.clinical_events, ClinicalEvent),
        "medication_events": (dataset.medications, MedicationEvent),
        "culture_events": (dataset.cultures, CultureEvent),
        "diagnosis_codes": (dataset.diagnoses, DiagnosisCode),
    }
    written = []
    for stem, (records, record_type) in streams.items():
        path = directory / f"{stem}.{fmt}"
        write_records(path, records, record_type)
        written.append(path)
    return written


def read_dataset_files(directory: str | Path):
    """Read the five event-universe files back as raw record lists.

    Returns (stays, clinical, medications, cultures, diagnoses); callers pass
    these through validate_dataset.
    """
    directory = Path(directory)
    out = []
    for stem, (_, reader) in DATASET_FILES.items():
        candidates = [directory / f"{stem}.csv", directory / f"{stem}.jsonl"]
        found = next((p for p in candidates if p.exists()), None)
        if found is None:
            raise IngestError(f"missing input file {stem}.csv or {stem}.jsonl in {directory}")
        out.append(reader(found))
    return tuple(out)


def write_json(path: str | Path, payload: Any) -> None:
    """Deterministic JSON dump: sorted keys, stable float repr, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
