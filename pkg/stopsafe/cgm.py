"""
CGM cleaning, wear compliance, glycemic episode bins and point-in-time
glucose lookup.
"""
import logging
from dataclasses import dataclass, field
from enum import StrEnum
from functools import cached_property
from typing import Sequence

import numpy as np
import pandas as pd

import settings

from .exceptions import InvalidWindowError, UnorderedInputError
from .ingest import GlucoseReading, ParticipantType

logger = logging.getLogger(__name__)

PHYSIOLOGIC_RATE = "physiologic_rate"

HYPO_MAX = 70.0
NORMAL_MAX = 180.0
MODERATE_MAX = 300.0


class Episode(StrEnum):
    HYPO = "hypo"
    NORMAL = "normal"
    MODERATE_HYPER = "moderate_hyper"
    SEVERE_HYPER = "severe_hyper"
    MISSING = "missing"
    CONTROL = "control"


# Ordering used for the monotonicity of the T1DM bins
EPISODE_RANK = {
    Episode.HYPO: 0,
    Episode.NORMAL: 1,
    Episode.MODERATE_HYPER: 2,
    Episode.SEVERE_HYPER: 3,
}


@dataclass
class GlucoseSeries:
    participant_id: str
    readings: list[GlucoseReading]
    removed: list[tuple[GlucoseReading, str]] = field(default_factory=list)

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([r.timestamp for r in self.readings], dtype=np.int64)

    @cached_property
    def values(self) -> np.ndarray:
        return np.array([r.glucose for r in self.readings], dtype=float)

    def removals_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "participant_id": reading.participant_id,
                    "timestamp": reading.timestamp,
                    "glucose": reading.glucose,
                    "reason": reason,
                }
                for reading, reason in self.removed
            ],
            columns=["participant_id", "timestamp", "glucose", "reason"],
        )


@dataclass(frozen=True)
class ComplianceReport:
    participant_id: str
    expected_slots: int
    observed_slots: int
    missing_fraction: float
    removed_fraction: float
    meets_fda: bool

    @classmethod
    def absent(cls, participant_id: str) -> "ComplianceReport":
        """Row for a participant who should have worn a sensor but has no readings."""
        return cls(participant_id, 0, 0, 1.0, 0.0, False)


def clean_series(
    raw: Sequence[GlucoseReading],
    window_s: int = settings.CGM_RATE_WINDOW_S,
    max_rate: float = settings.CGM_MAX_RATE,
) -> GlucoseSeries:
    """
    Removes physiologically impossible readings in one forward pass.

    Each reading is compared with the most recent *retained* reading. When the
    two are at most ``window_s`` apart and the relative change exceeds
    ``max_rate`` (strictly), the newer reading is removed and the retained one
    stays the comparator. Larger gaps reset the comparator.

    :raises UnorderedInputError: If timestamps do not strictly increase or the
        readings belong to more than one participant.
    """
    raw = list(raw)
    participant_id = raw[0].participant_id if raw else ""

    retained: list[GlucoseReading] = []
    removed: list[tuple[GlucoseReading, str]] = []
    previous_time = None

    for reading in raw:
        if reading.participant_id != participant_id:
            raise UnorderedInputError(
                f"clean_series got readings for [{participant_id}] and "
                f"[{reading.participant_id}]"
            )
        if previous_time is not None and reading.timestamp <= previous_time:
            raise UnorderedInputError(
                f"CGM readings for [{participant_id}] are not strictly increasing "
                f"at t={reading.timestamp}"
            )
        previous_time = reading.timestamp

        if retained:
            comparator = retained[-1]
            within = reading.timestamp - comparator.timestamp <= window_s
            change = abs(reading.glucose - comparator.glucose) / comparator.glucose
            if within and change > max_rate:
                removed.append((reading, PHYSIOLOGIC_RATE))
                continue
        retained.append(reading)

    if removed:
        logger.debug(
            f"Removed {len(removed)} of {len(raw)} CGM readings for [{participant_id}]"
        )
    return GlucoseSeries(participant_id, retained, removed)


def compliance(
    raw: Sequence[GlucoseReading],
    wear_start: int,
    wear_end: int,
    cadence_s: int = settings.CGM_CADENCE_S,
    max_missing: float = settings.FDA_MAX_MISSING,
) -> ComplianceReport:
    """
    Wear compliance over a 5-minute slot grid starting at ``wear_start``.

    A slot is observed when at least one raw reading falls in it. The removed
    fraction is the share of raw readings dropped by :func:`clean_series`.

    :raises InvalidWindowError: If wear_start >= wear_end.
    """
    if wear_start >= wear_end:
        raise InvalidWindowError(
            f"Wear window [{wear_start}, {wear_end}] is empty or reversed"
        )

    raw = list(raw)
    participant_id = raw[0].participant_id if raw else ""
    expected = (wear_end - wear_start) // cadence_s

    times = np.array([r.timestamp for r in raw], dtype=np.int64)
    slots = (times - wear_start) // cadence_s
    observed = int(np.unique(slots[(slots >= 0) & (slots < expected)]).size)

    missing_fraction = 1.0 - observed / expected if expected else 1.0
    removed_fraction = len(clean_series(raw).removed) / len(raw) if raw else 0.0

    return ComplianceReport(
        participant_id=participant_id,
        expected_slots=int(expected),
        observed_slots=observed,
        missing_fraction=missing_fraction,
        removed_fraction=removed_fraction,
        meets_fda=missing_fraction < max_missing,
    )


def classify_episode(glucose: float | None, participant_type: ParticipantType) -> Episode:
    """
    Glycemic episode for one glucose value.

    Control participants are always ``control``. For T1DM:
    <=70 hypo, 71-179 normal, 180-299 moderate_hyper, >=300 severe_hyper,
    missing value -> missing.
    """
    if participant_type == ParticipantType.CONTROL:
        return Episode.CONTROL
    if glucose is None or np.isnan(glucose):
        return Episode.MISSING
    if glucose <= HYPO_MAX:
        return Episode.HYPO
    if glucose < NORMAL_MAX:
        return Episode.NORMAL
    if glucose < MODERATE_MAX:
        return Episode.MODERATE_HYPER
    return Episode.SEVERE_HYPER


def classify_many(
    glucose: np.ndarray, participant_type: ParticipantType
) -> list[Episode]:
    """Array form of :func:`classify_episode`; NaN marks missing."""
    glucose = np.asarray(glucose, dtype=float)
    if participant_type == ParticipantType.CONTROL:
        return [Episode.CONTROL] * len(glucose)

    bins = (
        Episode.HYPO,
        Episode.NORMAL,
        Episode.MODERATE_HYPER,
        Episode.SEVERE_HYPER,
        Episode.MISSING,
    )
    # NaN compares False against every threshold; it is flagged last
    codes = np.full(glucose.shape, 3, dtype=int)
    codes[glucose < MODERATE_MAX] = 2
    codes[glucose < NORMAL_MAX] = 1
    codes[glucose <= HYPO_MAX] = 0
    codes[np.isnan(glucose)] = 4
    return [bins[code] for code in codes]


def glucose_at_many(
    series: GlucoseSeries | None,
    times: np.ndarray,
    staleness: float = settings.GLUCOSE_STALENESS,
) -> np.ndarray:
    """
    Step-hold lookup for many query times; NaN marks missing.
    """
    times = np.asarray(times, dtype=np.int64)
    result = np.full(times.shape, np.nan)
    if series is None or not series.readings:
        return result

    idx = np.searchsorted(series.times, times, side="right") - 1
    held = idx >= 0
    fresh = np.zeros_like(held)
    fresh[held] = times[held] - series.times[idx[held]] <= staleness
    result[fresh] = series.values[idx[fresh]]
    return result


def glucose_at(
    series: GlucoseSeries | None,
    t: int,
    staleness: float = settings.GLUCOSE_STALENESS,
) -> float | None:
    """
    Most recent retained reading at or before ``t`` that is at most
    ``staleness`` seconds old; ``None`` when there is none.
    """
    if staleness <= 0:
        raise ValueError(f"staleness must be positive, got {staleness}")
    value = glucose_at_many(series, np.array([t]), staleness)[0]
    return None if np.isnan(value) else float(value)


def compliance_summary(reports: Sequence[ComplianceReport]) -> dict[str, float | int]:
    """Mean and range of missing percentage, mean removed percentage."""
    if not reports:
        return {"participants": 0}
    missing = np.array([r.missing_fraction for r in reports]) * 100
    removed = np.array([r.removed_fraction for r in reports]) * 100
    return {
        "participants": len(reports),
        "missing_pct_mean": float(missing.mean()),
        "missing_pct_min": float(missing.min()),
        "missing_pct_max": float(missing.max()),
        "removed_pct_mean": float(removed.mean()),
        "meeting_fda": int(sum(r.meets_fda for r in reports)),
    }
