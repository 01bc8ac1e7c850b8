"""Generator visit records: CSV parsing, cleaning and feature engineering."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Iterable, Mapping

# Divisor floor for consumption_rate when the generator never ran (hours).
RUNTIME_EPS = 1e-6


class IngestError(Exception):
    pass


class MissingColumn(IngestError):
    def __init__(self, name: str):
        super().__init__(f"missing column: {name!r}")
        self.name = name


class EmptyFile(IngestError):
    pass


@dataclass(frozen=True)
class UnparsableCell:
    """Row-level diagnostic emitted by :func:`parse_csv`."""

    row: int
    col: str
    raw: str

    def to_dict(self) -> dict:
        return {"row": self.row, "col": self.col, "raw": self.raw}


@dataclass(frozen=True)
class TelemetryRecord:
    site_name: str
    cluster: str
    effective_date_of_visit: date | None
    previous_date_of_visit: date | None
    number_of_days: float | None
    generator_capacity_kva: float | None
    current_hour_meter: float | None
    previous_hour_meter: float | None
    previous_fuel_qte: float | None
    qte_fuel_found: float | None
    qte_fuel_added: float | None
    total_qte_left: float | None
    consumption_his: float | None
    running_time: float | None
    # derived
    consumption_rate: float | None = None
    running_time_per_day: float | None = None
    consumption_per_day_within_period: float | None = None
    fuel_consumed_between_visits: float | None = None
    fuel_consumed_between_visits_per_day: float | None = None
    maximum_consumption_per_day: float | None = None
    flags: frozenset = field(default_factory=frozenset)

    def replace(self, **changes) -> "TelemetryRecord":
        return dataclasses.replace(self, **changes)


# attribute name -> column header as exported by the fleet management system
DEFAULT_SCHEMA: dict[str, str] = {
    "site_name": "Site Name",
    "cluster": "Cluster",
    "effective_date_of_visit": "EFFECTIVE_DATE_OF_VISIT",
    "previous_date_of_visit": "PREVIOUS_DATE_OF_VISIT",
    "number_of_days": "NUMBER_OF_DAYS",
    "generator_capacity_kva": "GENERATOR_1_CAPACITY_(KVA)",
    "current_hour_meter": "CURRENT HOUR METER GE1",
    "previous_hour_meter": "PREVIOUS HOUR METER G1",
    "previous_fuel_qte": "PREVIOUS_FUEL_QTE",
    "qte_fuel_found": "QTE_FUEL_FOUND",
    "qte_fuel_added": "QTE_FUEL_ADDED",
    "total_qte_left": "TOTALE_QTE_LEFT",
    "consumption_his": "CONSUMPTION HIS",
    "running_time": "RUNNING_TIME",
    "consumption_rate": "CONSUMPTION_RATE",
    "running_time_per_day": "Running_time_per_day",
    "consumption_per_day_within_period": "Consumption_per_day_within_a_period",
    "fuel_consumed_between_visits": "Fuel_consumed_between_visits",
    "fuel_consumed_between_visits_per_day": "Fuel_consumed_between_visits_per_day",
    "maximum_consumption_per_day": "Maximum_consumption_per_day",
}

TEXT_FIELDS = ("site_name", "cluster")
DATE_FIELDS = ("effective_date_of_visit", "previous_date_of_visit")
RAW_NUMERIC_FIELDS = (
    "number_of_days",
    "generator_capacity_kva",
    "current_hour_meter",
    "previous_hour_meter",
    "previous_fuel_qte",
    "qte_fuel_found",
    "qte_fuel_added",
    "total_qte_left",
    "consumption_his",
    "running_time",
)
DERIVED_FIELDS = (
    "consumption_rate",
    "running_time_per_day",
    "consumption_per_day_within_period",
    "fuel_consumed_between_visits",
    "fuel_consumed_between_visits_per_day",
    "maximum_consumption_per_day",
)
REQUIRED_FIELDS = TEXT_FIELDS + DATE_FIELDS + RAW_NUMERIC_FIELDS
ALL_FIELDS = REQUIRED_FIELDS + DERIVED_FIELDS

# Model inputs: the numeric per-visit quantities, identifiers and dates excluded.
FEATURES = (
    "running_time_per_day",
    "consumption_per_day_within_period",
    "running_time",
    "consumption_his",
    "fuel_consumed_between_visits_per_day",
    "generator_capacity_kva",
    "fuel_consumed_between_visits",
    "consumption_rate",
    "maximum_consumption_per_day",
    "number_of_days",
    "previous_fuel_qte",
    "qte_fuel_added",
    "qte_fuel_found",
    "total_qte_left",
)


def _parse_date(raw: str, fallback_format: str | None) -> date:
    try:
        return date.fromisoformat(raw)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(raw).date()
    except ValueError:
        if fallback_format is None:
            raise
    return datetime.strptime(raw, fallback_format).date()


def parse_csv(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    *,
    date_format: str | None = "%d/%m/%Y",
) -> tuple[list[TelemetryRecord], list[UnparsableCell]]:
    """Read a fleet export into records.

    Columns are matched by header name, so their order in the file does not
    matter. ``schema`` maps record attributes to header names and only needs
    the entries that differ from :data:`DEFAULT_SCHEMA`. Empty cells become
    ``None`` (and are dropped later by :func:`clean`); cells that cannot be
    parsed reject the whole row and produce an :class:`UnparsableCell`.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(str(path)) from None
        header = [h.strip() for h in header]
        if not any(header):
            raise EmptyFile(str(path))
        position = {name: i for i, name in enumerate(header)}
        for attr in REQUIRED_FIELDS:
            if cols[attr] not in position:
                raise MissingColumn(cols[attr])
        present = [a for a in ALL_FIELDS if cols[a] in position]

        records: list[TelemetryRecord] = []
        diagnostics: list[UnparsableCell] = []
        for rowno, row in enumerate(reader, start=1):
            if not any(cell.strip() for cell in row):
                continue
            values: dict = {}
            bad = False
            for attr in present:
                i = position[cols[attr]]
                raw = row[i].strip() if i < len(row) else ""
                if raw == "":
                    values[attr] = None if attr not in TEXT_FIELDS else ""
                    continue
                try:
                    if attr in TEXT_FIELDS:
                        values[attr] = raw
                    elif attr in DATE_FIELDS:
                        values[attr] = _parse_date(raw, date_format)
                    else:
                        values[attr] = float(raw)
                except ValueError:
                    diagnostics.append(UnparsableCell(rowno, cols[attr], raw))
                    bad = True
            if not bad:
                records.append(TelemetryRecord(**values))
    return records, diagnostics


@dataclass
class CleaningLog:
    entries: list[dict] = field(default_factory=list)

    def add(self, row: int, field_name: str | None, action: str, reason: str) -> None:
        self.entries.append(
            {"row": row, "field": field_name, "action": action, "reason": reason}
        )

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def clean(records: Iterable[TelemetryRecord]) -> tuple[list[TelemetryRecord], CleaningLog]:
    """Drop unusable rows and repair inconsistent day counts.

    Rows are dropped for missing or non-finite numbers, negative quantities,
    reversed visit dates and duplicate ``(site, effective date)`` keys (first
    occurrence kept). A ``number_of_days`` that disagrees with the visit dates
    is replaced by the date difference.
    """
    log = CleaningLog()
    out: list[TelemetryRecord] = []
    seen: set = set()
    optional = ("maximum_consumption_per_day", "fuel_consumed_between_visits")
    for i, rec in enumerate(records):
        reason = None
        for attr in RAW_NUMERIC_FIELDS + optional:
            v = getattr(rec, attr)
            if v is None:
                if attr in optional:
                    continue
                reason = (attr, "missing value")
            elif not math.isfinite(v):
                reason = (attr, "non-finite value")
            elif v < 0:
                reason = (attr, "negative quantity")
            if reason:
                break
        if reason is None and not rec.site_name:
            reason = ("site_name", "missing value")
        if reason is None:
            for attr in DATE_FIELDS:
                if getattr(rec, attr) is None:
                    reason = (attr, "missing value")
                    break
        if reason is None and rec.effective_date_of_visit < rec.previous_date_of_visit:
            reason = ("effective_date_of_visit", "visit dates out of order")
        if reason is None:
            key = (rec.site_name, rec.effective_date_of_visit)
            if key in seen:
                reason = ("effective_date_of_visit", "duplicate visit")
            seen.add(key)
        if reason is not None:
            log.add(i, reason[0], "drop", reason[1])
            continue

        days = (rec.effective_date_of_visit - rec.previous_date_of_visit).days
        if rec.number_of_days != days:
            log.add(i, "number_of_days", "repair", "disagrees with visit dates")
            rec = rec.replace(number_of_days=float(days))
        out.append(rec)
    return out, log


def engineer_features(record: TelemetryRecord) -> TelemetryRecord:
    """Populate the derived per-day and rate fields of a cleaned record."""
    flags = set(record.flags)
    days = record.number_of_days
    if days < 1:
        flags.add("zero_days")
    divisor = max(days, 1.0)
    runtime = record.running_time
    if runtime < RUNTIME_EPS:
        flags.add("zero_runtime")
    consumed = record.fuel_consumed_between_visits
    if consumed is None:
        consumed = record.previous_fuel_qte + record.qte_fuel_added - record.qte_fuel_found
    return record.replace(
        consumption_rate=record.consumption_his / max(runtime, RUNTIME_EPS),
        running_time_per_day=runtime / divisor,
        consumption_per_day_within_period=record.consumption_his / divisor,
        fuel_consumed_between_visits=consumed,
        fuel_consumed_between_visits_per_day=consumed / divisor,
        flags=frozenset(flags),
    )


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_records_csv(
    records: Iterable[TelemetryRecord],
    path: str | Path,
    *,
    extra: Mapping[str, list] | None = None,
) -> None:
    """Write records under their export headers; ``extra`` appends columns."""
    records = list(records)
    extra = dict(extra or {})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([DEFAULT_SCHEMA[a] for a in ALL_FIELDS] + list(extra))
        for i, rec in enumerate(records):
            row = [_format_cell(getattr(rec, a)) for a in ALL_FIELDS]
            row += [_format_cell(col[i]) for col in extra.values()]
            w.writerow(row)
