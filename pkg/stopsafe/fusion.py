"""
Joins step-held glucose state onto 1 Hz telemetry, one drive at a time.
"""
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

import settings

from .cgm import Episode, GlucoseSeries, classify_many, glucose_at_many
from .exceptions import ParticipantMismatchError
from .ingest import ParticipantType, TelemetrySample

logger = logging.getLogger(__name__)


@dataclass
class FusedDrive:
    drive_id: str
    participant_id: str
    participant_type: ParticipantType
    samples: list[TelemetrySample]
    glucose: np.ndarray
    episodes: list[Episode]
    missing_fraction: float
    discarded: bool

    def __iter__(self) -> Iterator[tuple[TelemetrySample, float | None, Episode]]:
        for sample, value, episode in zip(self.samples, self.glucose, self.episodes):
            yield sample, None if np.isnan(value) else float(value), episode

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dominant_episode(self) -> Episode | None:
        if not self.episodes:
            return None
        return Counter(self.episodes).most_common(1)[0][0]


def fuse_drive(
    drive: Sequence[TelemetrySample],
    series: GlucoseSeries | None,
    participant_type: ParticipantType,
    staleness: float = settings.GLUCOSE_STALENESS,
    discard_threshold: float = settings.DISCARD_THRESHOLD,
) -> FusedDrive:
    """
    Annotates every sample of one drive with held glucose and its episode.

    A T1DM drive is discarded when its share of samples without glucose
    exceeds ``discard_threshold``; control drives are never discarded on
    glucose.

    :raises ParticipantMismatchError: If the drive mixes drives or
        participants, or the series belongs to someone else.
    """
    drive = list(drive)
    drive_id = drive[0].drive_id if drive else ""
    participant_id = drive[0].participant_id if drive else ""

    if any(s.drive_id != drive_id or s.participant_id != participant_id for s in drive):
        raise ParticipantMismatchError(
            f"fuse_drive got samples from more than one drive or participant "
            f"(first drive [{drive_id}])"
        )
    if series is not None and series.readings and series.participant_id != participant_id:
        raise ParticipantMismatchError(
            f"Drive [{drive_id}] belongs to [{participant_id}] but the glucose "
            f"series belongs to [{series.participant_id}]"
        )

    times = np.array([s.timestamp for s in drive], dtype=np.int64)
    glucose = glucose_at_many(series, times, staleness)
    episodes = classify_many(glucose, participant_type)

    missing_fraction = float(np.isnan(glucose).mean()) if drive else 0.0
    discarded = (
        participant_type == ParticipantType.T1DM
        and missing_fraction > discard_threshold
    )
    if discarded:
        logger.debug(
            f"Discarding drive [{drive_id}]: {missing_fraction:.1%} of samples "
            f"lack glucose"
        )

    return FusedDrive(
        drive_id=drive_id,
        participant_id=participant_id,
        participant_type=participant_type,
        samples=drive,
        glucose=glucose,
        episodes=episodes,
        missing_fraction=missing_fraction,
        discarded=discarded,
    )


def fusion_summary(drives: Sequence[FusedDrive]) -> tuple[int, int, float]:
    """(n_drives, n_discarded, discard_fraction) over the given drives."""
    n_drives = len(drives)
    n_discarded = sum(drive.discarded for drive in drives)
    return n_drives, n_discarded, n_discarded / n_drives if n_drives else 0.0


def fusion_frame(drives: Sequence[FusedDrive]) -> pd.DataFrame:
    """Per-drive audit table."""
    return pd.DataFrame(
        [
            {
                "drive_id": drive.drive_id,
                "participant_id": drive.participant_id,
                "participant_type": drive.participant_type.value,
                "samples": len(drive),
                "missing_fraction": drive.missing_fraction,
                "discarded": drive.discarded,
                "dominant_episode": (
                    drive.dominant_episode.value if drive.dominant_episode else ""
                ),
            }
            for drive in drives
        ],
        columns=[
            "drive_id",
            "participant_id",
            "participant_type",
            "samples",
            "missing_fraction",
            "discarded",
            "dominant_episode",
        ],
    )
