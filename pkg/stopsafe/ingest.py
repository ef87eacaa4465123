"""
Parsing and validation of the four input file families:

- telemetry:     timestamp, participant_id, drive_id, lat, lon, speed[, heading]
- cgm:           timestamp, participant_id, glucose
- detections:    timestamp, participant_id, drive_id, lat, lon, class_label, confidence
- auxiliary:     intersection database, encounter annotations, participant roster

All files are UTF-8 CSV with a header row. Timestamps may be integer epoch
seconds or ISO-8601 strings and are normalized to integer seconds. Every
record keeps the file and row it came from for error reporting.
"""
import itertools
import logging
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Collection, Iterable

import numpy as np
import pandas as pd

import settings
import utils

from .exceptions import (
    DanglingAnnotationKeyError,
    MalformedRowError,
    MissingColumnError,
    NonMonotonicTimeError,
    NonPositiveGlucoseError,
    UnknownClassLabelError,
    UnknownParticipantError,
)

logger = logging.getLogger(__name__)

TELEMETRY_COLUMNS = ("timestamp", "participant_id", "drive_id", "lat", "lon", "speed")
CGM_COLUMNS = ("timestamp", "participant_id", "glucose")
DETECTION_COLUMNS = (
    "timestamp",
    "participant_id",
    "drive_id",
    "lat",
    "lon",
    "class_label",
    "confidence",
)
INTERSECTION_COLUMNS = ("id", "lat", "lon", "control_type")
ANNOTATION_COLUMNS = (
    "drive_id",
    "encounter",
    "lead_vehicle",
    "crossing_vehicle",
    "crossing_pedestrian",
    "is_primary_driver",
)
ROSTER_COLUMNS = ("participant_id", "participant_type")


class ControlType(StrEnum):
    ALL_WAY = "all_way"
    MINOR_ROAD_ONLY = "minor_road_only"
    UNKNOWN = "unknown"


class ParticipantType(StrEnum):
    T1DM = "t1dm"
    CONTROL = "control"


class TrafficStatus(StrEnum):
    NONE = "none"
    PRESENT_WITH_EFFECT = "present_with_effect"
    PRESENT_WITHOUT_EFFECT = "present_without_effect"


class YesNo(StrEnum):
    YES = "yes"
    NO = "no"


@dataclass(frozen=True, slots=True)
class TelemetrySample:
    timestamp: int
    participant_id: str
    drive_id: str
    lat: float
    lon: float
    speed: float
    heading: float | None = None
    source: str = field(default="", compare=False, repr=False)
    row: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class GlucoseReading:
    timestamp: int
    participant_id: str
    glucose: float
    source: str = field(default="", compare=False, repr=False)
    row: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class DetectionRecord:
    timestamp: int
    participant_id: str
    drive_id: str
    lat: float
    lon: float
    class_label: str
    confidence: float
    source: str = field(default="", compare=False, repr=False)
    row: int = field(default=0, compare=False, repr=False)

    @property
    def is_candidate(self) -> bool:
        """Only stop sign detections feed intersection clustering."""
        return self.class_label == settings.STOP_SIGN_LABEL


@dataclass(frozen=True, slots=True)
class IntersectionRecord:
    id: str
    lat: float
    lon: float
    control_type: ControlType
    source: str = field(default="", compare=False, repr=False)
    row: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class Annotation:
    drive_id: str
    encounter: int
    lead_vehicle: TrafficStatus = TrafficStatus.NONE
    crossing_vehicle: TrafficStatus = TrafficStatus.NONE
    crossing_pedestrian: TrafficStatus = TrafficStatus.NONE
    is_primary_driver: YesNo = YesNo.YES
    source: str = field(default="", compare=False, repr=False)
    row: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class RosterEntry:
    participant_id: str
    participant_type: ParticipantType
    # Demographics and other columns ride along untouched
    metadata: tuple[tuple[str, str], ...] = ()
    source: str = field(default="", compare=False, repr=False)
    row: int = field(default=0, compare=False, repr=False)


@dataclass
class AuxTables:
    intersection_db: list[IntersectionRecord] = field(default_factory=list)
    annotations: dict[tuple[str, int], Annotation] = field(default_factory=dict)
    roster: dict[str, RosterEntry] = field(default_factory=dict)

    def annotation_for(self, drive_id: str, encounter: int) -> Annotation:
        """Annotation for an encounter, defaulting to {none, none, none, yes}."""
        return self.annotations.get(
            (drive_id, encounter), Annotation(drive_id=drive_id, encounter=encounter)
        )


# ---------------- Parsing helpers ----------------
def _read_table(path: Path, required: Iterable[str]) -> pd.DataFrame:
    """
    Reads a CSV as strings, checks the header and attaches the 1-based file
    line number of every row in ``source_row`` (the header is line 1).
    """
    path = Path(path)
    df = pd.read_csv(
        path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True
    )
    df.columns = df.columns.str.strip().str.lower()

    missing = [column for column in required if column not in df.columns]
    if missing:
        raise MissingColumnError(
            f"[{path}] is missing required column(s): {', '.join(missing)}"
        )

    df["source_row"] = np.arange(len(df), dtype=int) + 2
    return df


def _first_bad(df: pd.DataFrame, mask: pd.Series | np.ndarray) -> int:
    return int(df["source_row"].to_numpy()[np.flatnonzero(np.asarray(mask))[0]])


def _numeric(df: pd.DataFrame, column: str, path: Path, required=True) -> pd.Series:
    values = df[column].str.strip()
    parsed = pd.to_numeric(values, errors="coerce")
    bad = parsed.isna() & ((values != "") | required)
    if bad.any():
        row = _first_bad(df, bad)
        raise MalformedRowError(
            f"[{path}] row {row}: column [{column}] is not a number "
            f"({df[column].to_numpy()[np.flatnonzero(bad.to_numpy())[0]]!r})"
        )
    return parsed.astype(float)


def _timestamps(df: pd.DataFrame, path: Path) -> pd.Series:
    parsed = utils.to_epoch_seconds(df["timestamp"])
    bad = parsed.isna()
    if bad.any():
        row = _first_bad(df, bad)
        raise MalformedRowError(
            f"[{path}] row {row}: timestamp is neither epoch seconds nor ISO-8601"
        )
    return parsed.astype("int64")


def _require(df: pd.DataFrame, bad: pd.Series, path: Path, message: str):
    if bad.any():
        raise MalformedRowError(f"[{path}] row {_first_bad(df, bad)}: {message}")


def _non_empty(df: pd.DataFrame, columns: Iterable[str], path: Path):
    for column in columns:
        df[column] = df[column].str.strip()
        _require(df, df[column] == "", path, f"column [{column}] is empty")


def _enum(df: pd.DataFrame, column: str, enum: type[StrEnum], path: Path, default):
    values = df[column].str.strip().str.lower().replace("", str(default))
    allowed = {member.value for member in enum}
    _require(
        df,
        ~values.isin(allowed),
        path,
        f"column [{column}] must be one of {sorted(allowed)}",
    )
    return values


def _check_coordinates(df: pd.DataFrame, lat: pd.Series, lon: pd.Series, path: Path):
    _require(df, (lat < -90) | (lat > 90), path, "lat outside [-90, 90]")
    _require(df, (lon < -180) | (lon > 180), path, "lon outside [-180, 180]")


def _drop_duplicates(df: pd.DataFrame, key: list[str], path: Path, what: str):
    duplicated = df.duplicated(subset=key, keep="first")
    if count := int(duplicated.sum()):
        logger.warning(
            f"Collapsed {count} duplicate {what} row(s) in [{path}] "
            f"to their first occurrence"
        )
    return df[~duplicated]


# ---------------- Loaders ----------------
def load_telemetry(path: Path) -> list[TelemetrySample]:
    """
    Loads 1 Hz vehicle telemetry.

    :return: Samples sorted by (participant_id, drive_id, timestamp). Use
        :func:`group_drives` to split them into drives.
    :raises MissingColumnError: If a required column is absent.
    :raises MalformedRowError: If a value fails to parse or is out of range.
    :raises NonMonotonicTimeError: If two drives of one participant overlap in time.
    """
    path = Path(path)
    df = _read_table(path, TELEMETRY_COLUMNS)
    if df.empty:
        return []

    _non_empty(df, ("participant_id", "drive_id"), path)
    df["timestamp"] = _timestamps(df, path)
    df["lat"] = _numeric(df, "lat", path)
    df["lon"] = _numeric(df, "lon", path)
    df["speed"] = _numeric(df, "speed", path)
    _check_coordinates(df, df["lat"], df["lon"], path)
    _require(df, df["speed"] < 0, path, "speed is negative")

    if "heading" in df.columns:
        df["heading"] = _numeric(df, "heading", path, required=False)
        _require(
            df,
            (df["heading"] < 0) | (df["heading"] >= 360),
            path,
            "heading outside [0, 360)",
        )
    else:
        df["heading"] = np.nan

    owners = df.groupby("drive_id")["participant_id"].nunique()
    if (shared := owners[owners > 1]).size:
        raise MalformedRowError(
            f"[{path}] drive [{shared.index[0]}] is attributed to more than "
            f"one participant"
        )

    df = df.sort_values(
        ["participant_id", "drive_id", "timestamp", "source_row"], kind="mergesort"
    )
    df = _drop_duplicates(df, ["drive_id", "timestamp"], path, "telemetry")
    _check_drive_overlap(df, path)

    samples = [
        TelemetrySample(
            timestamp=int(row.timestamp),
            participant_id=row.participant_id,
            drive_id=row.drive_id,
            lat=float(row.lat),
            lon=float(row.lon),
            speed=float(row.speed),
            heading=None if np.isnan(row.heading) else float(row.heading),
            source=str(path),
            row=int(row.source_row),
        )
        for row in df.itertuples(index=False)
    ]
    logger.info(f"Loaded {len(samples)} telemetry samples from [{path}]")
    return samples


def _check_drive_overlap(df: pd.DataFrame, path: Path):
    spans = (
        df.groupby(["participant_id", "drive_id"])["timestamp"]
        .agg(["min", "max"])
        .reset_index()
        .sort_values(["participant_id", "min", "drive_id"], kind="mergesort")
    )
    for participant_id, drives in spans.groupby("participant_id", sort=True):
        starts = drives["min"].to_numpy()
        ends = drives["max"].to_numpy()
        overlap = np.flatnonzero(starts[1:] <= ends[:-1])
        if overlap.size:
            drive_id = drives["drive_id"].to_numpy()[overlap[0] + 1]
            raise NonMonotonicTimeError(
                f"[{path}] drive [{drive_id}] of participant [{participant_id}] "
                f"starts before the previous drive ends"
            )


def group_drives(samples: Iterable[TelemetrySample]) -> dict[str, list[TelemetrySample]]:
    """Groups sorted samples by drive_id, preserving order."""
    return {
        drive_id: list(group)
        for drive_id, group in itertools.groupby(samples, key=lambda s: s.drive_id)
    }


def load_cgm(path: Path) -> list[GlucoseReading]:
    """
    Loads CGM readings sorted by (participant_id, timestamp).

    :raises NonPositiveGlucoseError: If any glucose value is <= 0.
    """
    path = Path(path)
    df = _read_table(path, CGM_COLUMNS)
    if df.empty:
        return []

    _non_empty(df, ("participant_id",), path)
    df["timestamp"] = _timestamps(df, path)
    df["glucose"] = _numeric(df, "glucose", path)
    if (bad := df["glucose"] <= 0).any():
        raise NonPositiveGlucoseError(
            f"[{path}] row {_first_bad(df, bad)}: glucose must be positive"
        )

    df = df.sort_values(["participant_id", "timestamp", "source_row"], kind="mergesort")
    df = _drop_duplicates(df, ["participant_id", "timestamp"], path, "CGM")

    readings = [
        GlucoseReading(
            timestamp=int(row.timestamp),
            participant_id=row.participant_id,
            glucose=float(row.glucose),
            source=str(path),
            row=int(row.source_row),
        )
        for row in df.itertuples(index=False)
    ]
    logger.info(f"Loaded {len(readings)} CGM readings from [{path}]")
    return readings


def load_detections(
    path: Path, classes: Collection[str] = settings.DETECTION_CLASSES
) -> list[DetectionRecord]:
    path = Path(path)
    df = _read_table(path, DETECTION_COLUMNS)
    if df.empty:
        return []

    _non_empty(df, ("participant_id", "drive_id", "class_label"), path)
    df["class_label"] = df["class_label"].str.lower()
    if (unknown := ~df["class_label"].isin(set(classes))).any():
        raise UnknownClassLabelError(
            f"[{path}] row {_first_bad(df, unknown)}: unknown class label "
            f"[{df['class_label'].to_numpy()[np.flatnonzero(unknown.to_numpy())[0]]}]"
        )

    df["timestamp"] = _timestamps(df, path)
    df["lat"] = _numeric(df, "lat", path)
    df["lon"] = _numeric(df, "lon", path)
    df["confidence"] = _numeric(df, "confidence", path)
    _check_coordinates(df, df["lat"], df["lon"], path)
    _require(
        df,
        (df["confidence"] < 0) | (df["confidence"] > 1),
        path,
        "confidence outside [0, 1]",
    )

    df = df.sort_values(
        ["participant_id", "drive_id", "timestamp", "lat", "lon", "class_label"],
        kind="mergesort",
    )
    return [
        DetectionRecord(
            timestamp=int(row.timestamp),
            participant_id=row.participant_id,
            drive_id=row.drive_id,
            lat=float(row.lat),
            lon=float(row.lon),
            class_label=row.class_label,
            confidence=float(row.confidence),
            source=str(path),
            row=int(row.source_row),
        )
        for row in df.itertuples(index=False)
    ]


def load_intersection_db(path: Path) -> list[IntersectionRecord]:
    path = Path(path)
    df = _read_table(path, INTERSECTION_COLUMNS)
    if df.empty:
        return []

    _non_empty(df, ("id",), path)
    _require(df, df["id"].duplicated(), path, "duplicate intersection id")
    df["lat"] = _numeric(df, "lat", path)
    df["lon"] = _numeric(df, "lon", path)
    _check_coordinates(df, df["lat"], df["lon"], path)
    df["control_type"] = _enum(
        df, "control_type", ControlType, path, ControlType.UNKNOWN
    )

    df = df.sort_values("id", kind="mergesort")
    return [
        IntersectionRecord(
            id=row.id,
            lat=float(row.lat),
            lon=float(row.lon),
            control_type=ControlType(row.control_type),
            source=str(path),
            row=int(row.source_row),
        )
        for row in df.itertuples(index=False)
    ]


def load_annotations(path: Path | None) -> dict[tuple[str, int], Annotation]:
    """
    Loads encounter annotations keyed by (drive_id, encounter ordinal).
    An absent file yields an empty table, so every encounter takes the
    {none, none, none, yes} defaults.
    """
    if path is None:
        logger.info("No annotations file given; all encounters use default flags")
        return {}

    path = Path(path)
    df = _read_table(path, ANNOTATION_COLUMNS)
    if df.empty:
        return {}

    _non_empty(df, ("drive_id",), path)
    encounter = _numeric(df, "encounter", path)
    _require(
        df,
        (encounter < 1) | (encounter != np.floor(encounter)),
        path,
        "encounter must be a positive integer",
    )
    df["encounter"] = encounter.astype(int)
    _require(
        df,
        df.duplicated(subset=["drive_id", "encounter"]),
        path,
        "annotation key (drive_id, encounter) already used",
    )
    for column in ("lead_vehicle", "crossing_vehicle", "crossing_pedestrian"):
        df[column] = _enum(df, column, TrafficStatus, path, TrafficStatus.NONE)
    df["is_primary_driver"] = _enum(df, "is_primary_driver", YesNo, path, YesNo.YES)

    df = df.sort_values(["drive_id", "encounter"], kind="mergesort")
    return {
        (row.drive_id, int(row.encounter)): Annotation(
            drive_id=row.drive_id,
            encounter=int(row.encounter),
            lead_vehicle=TrafficStatus(row.lead_vehicle),
            crossing_vehicle=TrafficStatus(row.crossing_vehicle),
            crossing_pedestrian=TrafficStatus(row.crossing_pedestrian),
            is_primary_driver=YesNo(row.is_primary_driver),
            source=str(path),
            row=int(row.source_row),
        )
        for row in df.itertuples(index=False)
    }


def load_roster(path: Path) -> dict[str, RosterEntry]:
    path = Path(path)
    df = _read_table(path, ROSTER_COLUMNS)
    if df.empty:
        return {}

    _non_empty(df, ("participant_id",), path)
    _require(df, df["participant_id"].duplicated(), path, "duplicate participant_id")
    df["participant_type"] = _enum(
        df, "participant_type", ParticipantType, path, ""
    )
    extra = [c for c in df.columns if c not in ROSTER_COLUMNS and c != "source_row"]

    df = df.sort_values("participant_id", kind="mergesort")
    return {
        row["participant_id"]: RosterEntry(
            participant_id=row["participant_id"],
            participant_type=ParticipantType(row["participant_type"]),
            metadata=tuple((column, row[column]) for column in extra),
            source=str(path),
            row=int(row["source_row"]),
        )
        for row in df.to_dict(orient="records")
    }


def load_aux(
    detections_path: Path,
    intersections_path: Path,
    annotations_path: Path | None,
    roster_path: Path,
    known_drives: Collection[str] | None = None,
) -> tuple[list[DetectionRecord], AuxTables]:
    """
    Loads detections and the auxiliary tables.

    Detections of every declared class are returned; only those with
    ``is_candidate`` feed clustering, the rest pass through.

    :param known_drives: When given, annotations must reference one of these drives.
    :raises DanglingAnnotationKeyError: If an annotation references an unknown drive.
    """
    detections = load_detections(detections_path)
    aux = AuxTables(
        intersection_db=load_intersection_db(intersections_path),
        annotations=load_annotations(annotations_path),
        roster=load_roster(roster_path),
    )
    if known_drives is not None:
        _check_annotation_keys(aux, set(known_drives))

    candidates = sum(detection.is_candidate for detection in detections)
    logger.info(
        f"Loaded {len(detections)} detections ({candidates} clustering candidates), "
        f"{len(aux.intersection_db)} database intersections, "
        f"{len(aux.annotations)} annotations, {len(aux.roster)} roster entries"
    )
    return detections, aux


def _check_annotation_keys(aux: AuxTables, drives: set[str]):
    for drive_id, encounter in aux.annotations:
        if drive_id not in drives:
            annotation = aux.annotations[(drive_id, encounter)]
            raise DanglingAnnotationKeyError(
                f"[{annotation.source}] row {annotation.row}: annotation "
                f"({drive_id}, {encounter}) references no telemetry drive"
            )


def cross_validate(telemetry: Iterable[TelemetrySample], aux: AuxTables):
    """
    Checks that the roster covers every participant in telemetry and that
    annotations only reference existing drives.

    :raises UnknownParticipantError: Naming the first uncovered participant.
    :raises DanglingAnnotationKeyError: Naming the first dangling annotation.
    """
    participants: set[str] = set()
    drives: set[str] = set()
    for sample in telemetry:
        participants.add(sample.participant_id)
        drives.add(sample.drive_id)

    if uncovered := sorted(participants - aux.roster.keys()):
        raise UnknownParticipantError(
            f"Participant [{uncovered[0]}] appears in telemetry but not in the roster"
        )
    _check_annotation_keys(aux, drives)


# ---------------- Canonical writers ----------------
def _write(records: list[dict], columns: Iterable[str], path: Path) -> Path:
    pd.DataFrame(records, columns=list(columns)).to_csv(path, index=False)
    return path


def write_telemetry(samples: Iterable[TelemetrySample], path: Path) -> Path:
    records = [
        {
            "timestamp": s.timestamp,
            "participant_id": s.participant_id,
            "drive_id": s.drive_id,
            "lat": s.lat,
            "lon": s.lon,
            "speed": s.speed,
            "heading": "" if s.heading is None else s.heading,
        }
        for s in samples
    ]
    return _write(records, TELEMETRY_COLUMNS + ("heading",), path)


def write_cgm(readings: Iterable[GlucoseReading], path: Path) -> Path:
    records = [
        {"timestamp": r.timestamp, "participant_id": r.participant_id, "glucose": r.glucose}
        for r in readings
    ]
    return _write(records, CGM_COLUMNS, path)


def write_detections(detections: Iterable[DetectionRecord], path: Path) -> Path:
    records = [
        {
            "timestamp": d.timestamp,
            "participant_id": d.participant_id,
            "drive_id": d.drive_id,
            "lat": d.lat,
            "lon": d.lon,
            "class_label": d.class_label,
            "confidence": d.confidence,
        }
        for d in detections
    ]
    return _write(records, DETECTION_COLUMNS, path)


def write_intersection_db(records: Iterable[IntersectionRecord], path: Path) -> Path:
    rows = [
        {"id": r.id, "lat": r.lat, "lon": r.lon, "control_type": r.control_type.value}
        for r in records
    ]
    return _write(rows, INTERSECTION_COLUMNS, path)


def write_annotations(annotations: Iterable[Annotation], path: Path) -> Path:
    rows = [
        {
            "drive_id": a.drive_id,
            "encounter": a.encounter,
            "lead_vehicle": a.lead_vehicle.value,
            "crossing_vehicle": a.crossing_vehicle.value,
            "crossing_pedestrian": a.crossing_pedestrian.value,
            "is_primary_driver": a.is_primary_driver.value,
        }
        for a in annotations
    ]
    return _write(rows, ANNOTATION_COLUMNS, path)


def write_roster(entries: Iterable[RosterEntry], path: Path) -> Path:
    entries = list(entries)
    extra = sorted({key for entry in entries for key, _ in entry.metadata})
    rows = [
        {
            "participant_id": e.participant_id,
            "participant_type": e.participant_type.value,
            **dict(e.metadata),
        }
        for e in entries
    ]
    return _write(rows, ROSTER_COLUMNS + tuple(extra), path)
