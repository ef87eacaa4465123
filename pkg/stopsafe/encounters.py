"""
Stop intersection encounters: extraction from fused drives, stop behavior
classification from the speed profile, data selection and binarization of
the outcome (1 = unsafe, 0 = safe).
"""
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Sequence

import numpy as np
import pandas as pd

import settings
import utils

from .cgm import Episode
from .exceptions import EmptyWindowError, InvalidParameterError
from .fusion import FusedDrive
from .geo import EARTH_RADIUS_M, haversine_arrays, path_distance_arrays
from .ingest import AuxTables, ParticipantType, TelemetrySample, TrafficStatus, YesNo
from .intersections import Intersection

logger = logging.getLogger(__name__)

MODEL_EXCLUDED_EPISODES = {Episode.MODERATE_HYPER}
# Skip reason for an approach whose window starts inside the previous one
OVERLAPPING_WINDOW = "overlapping_window"
APPROACHES = "approaches"


class Behavior(StrEnum):
    FULL = "full"
    ROLLING = "rolling"
    NO_STOP = "no_stop"


UNSAFE = {Behavior.FULL: 0, Behavior.ROLLING: 1, Behavior.NO_STOP: 1}


@dataclass(frozen=True)
class Encounter:
    participant_id: str
    participant_type: ParticipantType
    drive_id: str
    intersection_id: str
    ordinal: int
    timestamp: int
    nearest_approach_m: float
    v_entry: float
    v_min: float
    stationary_s: float
    behavior: Behavior
    episode: Episode
    glucose: float | None
    window: list[tuple[TelemetrySample, float | None, Episode]] = field(repr=False)
    lead_vehicle: TrafficStatus = TrafficStatus.NONE
    crossing_vehicle: TrafficStatus = TrafficStatus.NONE
    crossing_pedestrian: TrafficStatus = TrafficStatus.NONE
    is_primary_driver: YesNo = YesNo.YES


@dataclass(frozen=True, slots=True)
class BehaviorRow:
    participant_id: str
    intersection_id: str
    participant_type: ParticipantType
    episode: Episode
    unsafe: int
    excluded_from_models: bool = False
    drive_id: str = ""
    timestamp: int = 0


def stop_metrics(
    speeds: Sequence[float],
    v_stop_eps: float = settings.V_STOP_EPS,
    sample_period: float = 1.0,
) -> tuple[float, float]:
    """(v_min, longest stationary stretch in seconds) of a speed window."""
    speeds = np.asarray(speeds, dtype=float)
    if not speeds.size:
        raise EmptyWindowError("Speed window is empty")
    return float(speeds.min()), utils.longest_run(speeds < v_stop_eps) * sample_period


def classify_stop(
    speeds: Sequence[float],
    v_entry: float,
    v_stop_eps: float = settings.V_STOP_EPS,
    min_stop_s: float = settings.MIN_STOP_S,
    no_stop_ratio: float = settings.NO_STOP_RATIO,
    v_entry_floor: float = settings.V_ENTRY_FLOOR,
    sample_period: float = 1.0,
) -> Behavior:
    """
    Classifies one approach, in order of precedence:

    - full:    speed below ``v_stop_eps`` for at least ``min_stop_s``
               consecutive seconds
    - no_stop: minimum speed at least ``no_stop_ratio`` of the entry speed
               (entry speed floored at ``v_entry_floor``)
    - rolling: everything else

    :param sample_period: Seconds between speed samples (1.0 for 1 Hz).
    :raises EmptyWindowError: If ``speeds`` is empty.

    Examples:
        - [8, 5, 2, 0.2, 0.2, 0.3, 4, 8] -> full
        - [10, 10, 10, 10]               -> no_stop
        - [10, 7, 4, 2, 5, 9]            -> rolling
    """
    v_min, stationary_s = stop_metrics(speeds, v_stop_eps, sample_period)

    # Tolerance absorbs accumulation error of fractional sample periods
    if stationary_s + 1e-9 >= min_stop_s:
        return Behavior.FULL
    if v_min >= no_stop_ratio * max(v_entry, v_entry_floor):
        return Behavior.NO_STOP
    return Behavior.ROLLING


def _local_minima(d: np.ndarray, below: float) -> np.ndarray:
    """Indices of local minima of ``d`` under ``below``; one per plateau."""
    n = len(d)
    left = np.ones(n, dtype=bool)
    right = np.ones(n, dtype=bool)
    left[1:] = d[1:] <= d[:-1]
    right[:-1] = d[:-1] < d[1:]
    return np.flatnonzero(left & right & (d < below))


def _collapse(minima: np.ndarray, times: np.ndarray, d: np.ndarray, refractory_s: float):
    """Keeps the closest minimum of every run separated by <= refractory_s."""
    kept: list[int] = []
    group = [int(minima[0])] if minima.size else []
    for i in minima[1:]:
        if times[i] - times[group[-1]] <= refractory_s:
            group.append(int(i))
            continue
        kept.append(min(group, key=lambda k: (d[k], k)))
        group = [int(i)]
    if group:
        kept.append(min(group, key=lambda k: (d[k], k)))
    return kept


def _nearby(intersections: Sequence[Intersection], lats, lons, margin_m: float):
    lat_margin = np.degrees(margin_m / EARTH_RADIUS_M)
    lon_margin = lat_margin / max(np.cos(np.radians(np.abs(lats).max())), 1e-6)
    lat_lo, lat_hi = lats.min() - lat_margin, lats.max() + lat_margin
    lon_lo, lon_hi = lons.min() - lon_margin, lons.max() + lon_margin
    return [
        i
        for i in intersections
        if lat_lo <= i.center.lat <= lat_hi and lon_lo <= i.center.lon <= lon_hi
    ]


def detect_encounters(
    drive: FusedDrive,
    intersections: Sequence[Intersection],
    capture_radius: float = settings.CAPTURE_RADIUS,
    refractory_s: float = settings.REFRACTORY_S,
    upstream_m: float = settings.UPSTREAM_M,
    downstream_m: float = settings.DOWNSTREAM_M,
    v_stop_eps: float = settings.V_STOP_EPS,
    min_stop_s: float = settings.MIN_STOP_S,
    no_stop_ratio: float = settings.NO_STOP_RATIO,
    tally: Counter | None = None,
) -> list[Encounter]:
    """
    Extracts every approach of a drive to the given intersections.

    Each local minimum of distance-to-center below ``capture_radius`` is a
    candidate; minima of the same intersection within ``refractory_s`` collapse
    to the closest. The window spans ``upstream_m`` before to ``downstream_m``
    after the nearest approach along the path, truncated at the drive ends and
    at the previous window of the same intersection.

    Encounters are numbered 1, 2, ... in time order within the drive; the
    number is the annotation key together with the drive id. Approaches whose
    window would start inside the previous window of the same intersection are
    not emitted. When ``tally`` is given it counts every approach under
    ``APPROACHES`` and every skipped one under its reason.

    :raises InvalidParameterError: If capture_radius <= 0.
    """
    if capture_radius <= 0:
        raise InvalidParameterError(f"capture_radius must be positive, got {capture_radius}")
    if not len(drive):
        return []

    samples = drive.samples
    lats = np.array([s.lat for s in samples])
    lons = np.array([s.lon for s in samples])
    speeds = np.array([s.speed for s in samples])
    times = np.array([s.timestamp for s in samples], dtype=np.int64)
    path = path_distance_arrays(lats, lons)
    fused = list(drive)

    found = []
    for intersection in _nearby(intersections, lats, lons, capture_radius):
        d = haversine_arrays(lats, lons, intersection.center.lat, intersection.center.lon)
        minima = _local_minima(d, capture_radius)
        previous_end = 0
        for k in _collapse(minima, times, d, refractory_s):
            if tally is not None:
                tally[APPROACHES] += 1
            lo = int(np.searchsorted(path, path[k] - upstream_m, side="left"))
            hi = int(np.searchsorted(path, path[k] + downstream_m, side="right"))
            lo = max(lo, previous_end)
            if lo > k:
                logger.debug(
                    f"Drive [{drive.drive_id}]: approach to [{intersection.id}] at "
                    f"t={times[k]} overlaps the previous window; skipped"
                )
                if tally is not None:
                    tally[OVERLAPPING_WINDOW] += 1
                continue
            previous_end = hi

            window_speeds = speeds[lo:hi]
            v_entry = float(window_speeds[0])
            v_min, stationary_s = stop_metrics(window_speeds, v_stop_eps)
            behavior = classify_stop(
                window_speeds,
                v_entry,
                v_stop_eps=v_stop_eps,
                min_stop_s=min_stop_s,
                no_stop_ratio=no_stop_ratio,
            )
            glucose = drive.glucose[k]
            found.append(
                dict(
                    participant_id=drive.participant_id,
                    participant_type=drive.participant_type,
                    drive_id=drive.drive_id,
                    intersection_id=intersection.id,
                    timestamp=int(times[k]),
                    nearest_approach_m=float(d[k]),
                    v_entry=v_entry,
                    v_min=v_min,
                    stationary_s=stationary_s,
                    behavior=behavior,
                    episode=drive.episodes[k],
                    glucose=None if np.isnan(glucose) else float(glucose),
                    window=fused[lo:hi],
                )
            )

    found.sort(key=lambda e: (e["timestamp"], e["intersection_id"]))
    return [Encounter(ordinal=n, **fields) for n, fields in enumerate(found, start=1)]


def annotate(encounters: Sequence[Encounter], aux: AuxTables) -> list[Encounter]:
    """Attaches selection flags from the annotation table (defaults when absent)."""
    annotated = []
    for encounter in encounters:
        annotation = aux.annotation_for(encounter.drive_id, encounter.ordinal)
        annotated.append(
            replace(
                encounter,
                lead_vehicle=annotation.lead_vehicle,
                crossing_vehicle=annotation.crossing_vehicle,
                crossing_pedestrian=annotation.crossing_pedestrian,
                is_primary_driver=annotation.is_primary_driver,
            )
        )
    return annotated


def exclusion_reason(encounter: Encounter) -> str | None:
    """First selection rule an encounter fails, or None when it is kept."""
    if encounter.is_primary_driver != YesNo.YES:
        return "not_primary_driver"
    for flag in ("lead_vehicle", "crossing_vehicle", "crossing_pedestrian"):
        if getattr(encounter, flag) == TrafficStatus.PRESENT_WITH_EFFECT:
            return f"{flag}_effect"
    return None


def apply_selection(encounters: Sequence[Encounter]) -> list[Encounter]:
    """
    Keeps encounters driven by the consented participant whose behavior was
    not altered by a lead vehicle, crossing vehicle or crossing pedestrian.
    """
    return [e for e in encounters if exclusion_reason(e) is None]


def binarize(encounters: Sequence[Encounter]) -> list[BehaviorRow]:
    """
    Turns selected encounters into model rows: full -> 0, rolling/no_stop -> 1.

    Encounters with a missing episode are dropped (count logged); moderate
    hyperglycemia rows are kept but flagged ``excluded_from_models``.
    """
    rows = [
        BehaviorRow(
            participant_id=e.participant_id,
            intersection_id=e.intersection_id,
            participant_type=e.participant_type,
            episode=e.episode,
            unsafe=UNSAFE[e.behavior],
            excluded_from_models=e.episode in MODEL_EXCLUDED_EPISODES,
            drive_id=e.drive_id,
            timestamp=e.timestamp,
        )
        for e in encounters
        if e.episode != Episode.MISSING
    ]
    if dropped := len(encounters) - len(rows):
        logger.warning(f"Dropped {dropped} encounter(s) with missing glucose episode")
    return rows


# ---------------- Tables ----------------
ENCOUNTER_COLUMNS = [
    "participant_id",
    "participant_type",
    "drive_id",
    "encounter",
    "intersection_id",
    "timestamp",
    "nearest_approach_m",
    "window_samples",
    "v_entry",
    "v_min",
    "stationary_s",
    "lead_vehicle",
    "crossing_vehicle",
    "crossing_pedestrian",
    "is_primary_driver",
    "behavior",
    "glucose",
    "episode",
    "excluded_by",
]


def encounters_frame(encounters: Sequence[Encounter]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "participant_id": e.participant_id,
                "participant_type": e.participant_type.value,
                "drive_id": e.drive_id,
                "encounter": e.ordinal,
                "intersection_id": e.intersection_id,
                "timestamp": e.timestamp,
                "nearest_approach_m": e.nearest_approach_m,
                "window_samples": len(e.window),
                "v_entry": e.v_entry,
                "v_min": e.v_min,
                "stationary_s": e.stationary_s,
                "lead_vehicle": e.lead_vehicle.value,
                "crossing_vehicle": e.crossing_vehicle.value,
                "crossing_pedestrian": e.crossing_pedestrian.value,
                "is_primary_driver": e.is_primary_driver.value,
                "behavior": e.behavior.value,
                "glucose": e.glucose,
                "episode": e.episode.value,
                "excluded_by": exclusion_reason(e) or "",
            }
            for e in encounters
        ],
        columns=ENCOUNTER_COLUMNS,
    )


def behavior_frame(rows: Sequence[BehaviorRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "participant_id": r.participant_id,
                "intersection_id": r.intersection_id,
                "participant_type": r.participant_type.value,
                "episode": r.episode.value,
                "unsafe": r.unsafe,
                "excluded_from_models": r.excluded_from_models,
                "drive_id": r.drive_id,
                "timestamp": r.timestamp,
            }
            for r in rows
        ],
        columns=[
            "participant_id",
            "intersection_id",
            "participant_type",
            "episode",
            "unsafe",
            "excluded_from_models",
            "drive_id",
            "timestamp",
        ],
    )


def selection_table(encounters: Sequence[Encounter]) -> dict[str, dict[str, dict]]:
    """
    Counts of every selection variable status by safe / unsafe / total, with
    column percentages, over all (pre-selection) encounters.
    """
    statuses = {
        "lead_vehicle": [s.value for s in TrafficStatus],
        "crossing_vehicle": [s.value for s in TrafficStatus],
        "crossing_pedestrian": [s.value for s in TrafficStatus],
        "is_primary_driver": [s.value for s in YesNo],
    }
    columns = {
        "safe": [e for e in encounters if UNSAFE[e.behavior] == 0],
        "unsafe": [e for e in encounters if UNSAFE[e.behavior] == 1],
        "total": list(encounters),
    }

    table: dict[str, dict[str, dict]] = {}
    for variable, values in statuses.items():
        table[variable] = {}
        for value in values:
            cells = {}
            for column, members in columns.items():
                count = sum(getattr(e, variable).value == value for e in members)
                cells[column] = {
                    "n": count,
                    "pct": 100.0 * count / len(members) if members else 0.0,
                }
            table[variable][value] = cells
    return table


def behavior_counts(encounters: Sequence[Encounter]) -> dict[str, dict[str, int]]:
    """Encounter counts by episode (rows) and behavior (columns)."""
    counts: dict[str, dict[str, int]] = {}
    for e in encounters:
        by_behavior = counts.setdefault(
            e.episode.value, {b.value: 0 for b in Behavior}
        )
        by_behavior[e.behavior.value] += 1
    return dict(sorted(counts.items()))


def per_participant(encounters: Sequence[Encounter]) -> dict[str, float]:
    """Mean and range of encounters per participant."""
    counts = pd.Series([e.participant_id for e in encounters]).value_counts()
    if counts.empty:
        return {"participants": 0}
    return {
        "participants": int(counts.size),
        "mean": float(counts.mean()),
        "min": int(counts.min()),
        "max": int(counts.max()),
    }
