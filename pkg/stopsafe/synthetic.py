"""
Deterministic synthetic corpus covering every input family.

A 3 x 4 street grid of stop intersections (400 m spacing) is driven by three
participants: two with T1DM and one control. Each drive goes out and back
along one grid line at 1 Hz, approaching every intersection with a full,
rolling or no stop. Stop sign detections are placed at the sign of each
approach, the intersection database knows a subset of the grid plus two
distant entries, and T1DM participants carry a CGM series that settles on a
per-drive glucose level, with rate spikes, dropped slots and one coverage gap
that discards a drive.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cgm import Episode
from .encounters import Behavior
from .geo import GeoPoint, LocalPoint, from_local
from .ingest import (
    Annotation,
    ControlType,
    DetectionRecord,
    GlucoseReading,
    IntersectionRecord,
    ParticipantType,
    RosterEntry,
    TelemetrySample,
    TrafficStatus,
    YesNo,
    write_annotations,
    write_cgm,
    write_detections,
    write_intersection_db,
    write_roster,
    write_telemetry,
)

logger = logging.getLogger(__name__)

ORIGIN = GeoPoint(41.25, -95.93)
GRID_ROWS, GRID_COLS, SPACING_M = 3, 4, 400.0
START_EPOCH = 1590969600
DRIVE_SPACING_S = 8 * 3600

LEAD_IN_M = 300.0
TURN_BEYOND_M = 500.0
LANE_OFFSET_M = 1.5
GPS_NOISE_M = 0.3

CRUISE, ROLL = 11.0, 3.0
ACCEL, DECEL = 1.5, 3.0
DWELL_S = 4
STOP_SHORT_M = 2.0

SIGN_SETBACK_M = 8.0
SIGN_SIDE_M = 4.0
SIGN_NOISE_M = 2.0
DETECTIONS_PER_APPROACH = 3

CGM_CADENCE_S = 300
CGM_STEP = 0.06
CGM_DROP_RATE = 0.05

BEHAVIOR_CYCLE = (Behavior.FULL, Behavior.ROLLING, Behavior.NO_STOP, Behavior.ROLLING)
EPISODE_LEVELS = {
    Episode.HYPO: 60.0,
    Episode.NORMAL: 120.0,
    Episode.MODERATE_HYPER: 240.0,
    Episode.SEVERE_HYPER: 320.0,
}


@dataclass(frozen=True)
class ParticipantPlan:
    participant_id: str
    participant_type: ParticipantType
    episodes: tuple[Episode | None, ...]
    metadata: tuple[tuple[str, str], ...] = ()


PLANS = (
    ParticipantPlan(
        "P01",
        ParticipantType.T1DM,
        (Episode.NORMAL, Episode.HYPO, Episode.SEVERE_HYPER, Episode.NORMAL,
         Episode.MODERATE_HYPER),
        (("age", "34"), ("sex", "F")),
    ),
    ParticipantPlan(
        "P02",
        ParticipantType.T1DM,
        (Episode.SEVERE_HYPER, Episode.NORMAL, Episode.HYPO, Episode.NORMAL,
         Episode.NORMAL),
        (("age", "41"), ("sex", "M")),
    ),
    ParticipantPlan(
        "P03",
        ParticipantType.CONTROL,
        (None,) * 5,
        (("age", "37"), ("sex", "F")),
    ),
)

# Drive whose CGM coverage has a gap long enough to discard it
GAP_DRIVE = "P02-D4"

DATABASE_GRID = {
    "SI-01": ((0, 0), ControlType.ALL_WAY),
    "SI-02": ((1, 1), ControlType.MINOR_ROAD_ONLY),
    "SI-03": ((2, 2), ControlType.ALL_WAY),
    "SI-04": ((0, 3), ControlType.MINOR_ROAD_ONLY),
}
DATABASE_DISTANT = {
    "SI-90": ((6000.0, 4000.0), ControlType.ALL_WAY),
    "SI-91": ((-5000.0, -6000.0), ControlType.MINOR_ROAD_ONLY),
}
NOISE_SIGNS = ((-2000.0, -2000.0), (3000.0, -1500.0), (-1500.0, 2500.0), (2500.0, 3000.0))

ANNOTATIONS = (
    Annotation("P01-D2", 2, crossing_vehicle=TrafficStatus.PRESENT_WITH_EFFECT),
    Annotation("P02-D1", 3, lead_vehicle=TrafficStatus.PRESENT_WITHOUT_EFFECT),
    Annotation("P03-D1", 1, is_primary_driver=YesNo.NO),
    Annotation("P03-D4", 4, crossing_pedestrian=TrafficStatus.PRESENT_WITH_EFFECT),
)


@dataclass
class SyntheticCorpus:
    telemetry: list[TelemetrySample] = field(default_factory=list)
    cgm: list[GlucoseReading] = field(default_factory=list)
    detections: list[DetectionRecord] = field(default_factory=list)
    intersection_db: list[IntersectionRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    roster: list[RosterEntry] = field(default_factory=list)
    centers: dict[str, GeoPoint] = field(default_factory=dict)


@dataclass(frozen=True)
class _Line:
    start: np.ndarray
    direction: np.ndarray
    crossings: tuple[tuple[str, float], ...]
    length: float

    @property
    def left(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])

    def position(self, s: np.ndarray) -> np.ndarray:
        """Route point at path length ``s`` of the out-and-back loop."""
        s = np.asarray(s, dtype=float)[:, None]
        turn = self.length + 2 * LANE_OFFSET_M
        out = self.start + s * self.direction - LANE_OFFSET_M * self.left
        across = (
            self.start
            + self.length * self.direction
            + (s - self.length - LANE_OFFSET_M) * self.left
        )
        back = self.start + (2 * self.length + 2 * LANE_OFFSET_M - s) * self.direction
        back = back + LANE_OFFSET_M * self.left
        return np.where(s <= self.length, out, np.where(s <= turn, across, back))


def grid_key(row: int, col: int) -> str:
    return f"r{row}c{col}"


def _grid_xy(row: int, col: int) -> np.ndarray:
    return np.array([col * SPACING_M, row * SPACING_M])


def _lines() -> list[_Line]:
    lines = []
    for row in range(GRID_ROWS):
        lines.append(
            _Line(
                start=np.array([-LEAD_IN_M, row * SPACING_M]),
                direction=np.array([1.0, 0.0]),
                crossings=tuple(
                    (grid_key(row, col), LEAD_IN_M + col * SPACING_M)
                    for col in range(GRID_COLS)
                ),
                length=LEAD_IN_M + (GRID_COLS - 1) * SPACING_M + TURN_BEYOND_M,
            )
        )
    for col in range(GRID_COLS):
        lines.append(
            _Line(
                start=np.array([col * SPACING_M, -LEAD_IN_M]),
                direction=np.array([0.0, 1.0]),
                crossings=tuple(
                    (grid_key(row, col), LEAD_IN_M + row * SPACING_M)
                    for row in range(GRID_ROWS)
                ),
                length=LEAD_IN_M + (GRID_ROWS - 1) * SPACING_M + TURN_BEYOND_M,
            )
        )
    return lines


def _to_geo(xy: np.ndarray) -> list[GeoPoint]:
    return [from_local(LocalPoint(float(x), float(y), ORIGIN)) for x, y in xy]


def _simulate(
    events: list[tuple[float, Behavior]], total: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """1 Hz (path length, speed) samples for a route with approach events."""
    positions, speeds = [], []
    s, v = 0.0, CRUISE
    k, dwell = 0, None

    while s < total:
        while k < len(events) and events[k][0] < s - 0.5:
            k += 1

        target = CRUISE
        if k < len(events):
            s_event, behavior = events[k]
            gap = s_event - s
            if behavior == Behavior.FULL:
                remaining = gap - STOP_SHORT_M
                if dwell is None and remaining <= 0.5:
                    dwell = DWELL_S
                if dwell is not None:
                    positions.append(s)
                    speeds.append(0.0)
                    dwell -= 1
                    if dwell == 0:
                        dwell = None
                        k += 1
                    v = 0.0
                    continue
                target = min(CRUISE, np.sqrt(2 * ACCEL * remaining), remaining)
            elif behavior == Behavior.ROLLING:
                target = max(ROLL, min(CRUISE, np.sqrt(ROLL**2 + 2 * ACCEL * max(gap, 0.0))))

        v = float(np.clip(target, v - DECEL, v + ACCEL))
        noisy = max(0.0, v + rng.normal(0.0, 0.05)) if v > 0 else 0.0
        positions.append(s)
        speeds.append(noisy)
        s += max(v, 0.1)

    return np.array(positions), np.array(speeds)


def _drive_plan(line: _Line, drive_index: int):
    """Approach events of one out-and-back drive, in path order."""
    back_start = line.length + 2 * LANE_OFFSET_M
    passes = [(along, key, 1.0) for key, along in line.crossings]
    passes += [
        (back_start + line.length - along, key, -1.0)
        for key, along in reversed(line.crossings)
    ]
    return [
        (s_event, key, sign, BEHAVIOR_CYCLE[(drive_index + i) % len(BEHAVIOR_CYCLE)])
        for i, (s_event, key, sign) in enumerate(passes)
    ]


def _glucose_series(
    participant_id: str,
    windows: list[tuple[int, int, Episode]],
    gaps: list[tuple[int, int]],
    rng: np.random.Generator,
) -> list[GlucoseReading]:
    wear_start = windows[0][0] - 6 * 3600
    wear_end = windows[-1][1] + 3600
    times = np.arange(wear_start, wear_end, CGM_CADENCE_S)

    values = np.empty(len(times))
    g = EPISODE_LEVELS[Episode.NORMAL]
    for i, t in enumerate(times):
        upcoming = next((w for w in windows if w[1] >= t), None)
        target = EPISODE_LEVELS[upcoming[2]] if upcoming else EPISODE_LEVELS[Episode.NORMAL]
        g += np.clip(target - g, -CGM_STEP * g, CGM_STEP * g)
        values[i] = g * (1 + rng.normal(0.0, 0.004))

    protected = np.zeros(len(times), dtype=bool)
    for start, end, _ in windows:
        protected |= (times >= start - 900) & (times <= end + 300)

    spikes = rng.choice(np.flatnonzero(~protected), size=3, replace=False)
    values[spikes] *= 1.4

    keep = np.ones(len(times), dtype=bool)
    droppable = np.flatnonzero(~protected)
    keep[rng.choice(droppable, size=int(CGM_DROP_RATE * len(times)), replace=False)] = False
    for start, end in gaps:
        keep &= ~((times >= start) & (times <= end))

    return [
        GlucoseReading(int(t), participant_id, round(float(value), 1))
        for t, value, kept in zip(times, values, keep)
        if kept
    ]


def generate_corpus(seed: int = 0) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    lines = _lines()
    corpus = SyntheticCorpus()

    for row in range(GRID_ROWS):
        for col in range(GRID_COLS):
            corpus.centers[grid_key(row, col)] = _to_geo(_grid_xy(row, col)[None])[0]

    drive_counter = 0
    for p, plan in enumerate(PLANS):
        corpus.roster.append(
            RosterEntry(plan.participant_id, plan.participant_type, plan.metadata)
        )
        windows, gaps = [], []
        for d, episode in enumerate(plan.episodes):
            drive_id = f"{plan.participant_id}-D{d + 1}"
            line = lines[drive_counter % len(lines)]
            plan_events = _drive_plan(line, drive_counter)
            drive_counter += 1

            total = 2 * line.length + 2 * LANE_OFFSET_M
            s, speeds = _simulate([(e[0], e[3]) for e in plan_events], total, rng)
            t0 = START_EPOCH + p * 3 * 3600 + d * DRIVE_SPACING_S
            times = t0 + np.arange(len(s))

            xy = line.position(s) + rng.normal(0.0, GPS_NOISE_M, size=(len(s), 2))
            out_heading = 90.0 if line.direction[0] else 0.0
            headings = np.where(s <= line.length, out_heading, (out_heading + 180.0) % 360)
            for t, point, speed, heading in zip(times, _to_geo(xy), speeds, headings):
                corpus.telemetry.append(
                    TelemetrySample(
                        timestamp=int(t),
                        participant_id=plan.participant_id,
                        drive_id=drive_id,
                        lat=round(point.lat, 7),
                        lon=round(point.lon, 7),
                        speed=round(float(speed), 3),
                        heading=float(heading),
                    )
                )

            for s_event, key, sign, _ in plan_events:
                row, col = int(key[1]), int(key[3])
                travel = sign * line.direction
                right = np.array([travel[1], -travel[0]])
                sign_xy = _grid_xy(row, col) - SIGN_SETBACK_M * travel + SIGN_SIDE_M * right
                seen_at = int(times[min(np.searchsorted(s, s_event - 30.0), len(s) - 1)])
                noisy = sign_xy + rng.normal(0.0, SIGN_NOISE_M, size=(DETECTIONS_PER_APPROACH, 2))
                for i, point in enumerate(_to_geo(noisy)):
                    corpus.detections.append(
                        DetectionRecord(
                            timestamp=seen_at + i,
                            participant_id=plan.participant_id,
                            drive_id=drive_id,
                            lat=round(point.lat, 7),
                            lon=round(point.lon, 7),
                            class_label="stop_sign",
                            confidence=round(float(rng.uniform(0.6, 0.99)), 3),
                        )
                    )

            # Mid-block signals and traffic pass through without clustering
            mid = line.position(np.array([LEAD_IN_M + SPACING_M / 2]))
            for label, point in zip(("traffic_light", "vehicle"), _to_geo(np.vstack([mid, mid]))):
                corpus.detections.append(
                    DetectionRecord(
                        timestamp=int(times[0]) + 30,
                        participant_id=plan.participant_id,
                        drive_id=drive_id,
                        lat=round(point.lat, 7),
                        lon=round(point.lon, 7),
                        class_label=label,
                        confidence=0.8,
                    )
                )

            if episode is not None:
                windows.append((int(times[0]), int(times[-1]), episode))
                if drive_id == GAP_DRIVE:
                    gaps.append((int(times[0]) - 1200, int(times[-1]) + 600))

        if plan.participant_type == ParticipantType.T1DM:
            corpus.cgm.extend(_glucose_series(plan.participant_id, windows, gaps, rng))

    first = corpus.telemetry[0]
    for i, point in enumerate(_to_geo(np.array(NOISE_SIGNS))):
        corpus.detections.append(
            DetectionRecord(
                timestamp=first.timestamp + 100 + i,
                participant_id=first.participant_id,
                drive_id=first.drive_id,
                lat=round(point.lat, 7),
                lon=round(point.lon, 7),
                class_label="stop_sign",
                confidence=0.7,
            )
        )

    for record_id, ((row, col), control_type) in DATABASE_GRID.items():
        point = _to_geo((_grid_xy(row, col) + rng.normal(0.0, 2.0, size=2))[None])[0]
        corpus.intersection_db.append(
            IntersectionRecord(record_id, round(point.lat, 7), round(point.lon, 7), control_type)
        )
    for record_id, (xy, control_type) in DATABASE_DISTANT.items():
        point = _to_geo(np.array([xy]))[0]
        corpus.intersection_db.append(
            IntersectionRecord(record_id, round(point.lat, 7), round(point.lon, 7), control_type)
        )

    corpus.annotations = list(ANNOTATIONS)
    logger.info(
        f"Generated synthetic corpus (seed {seed}): {len(corpus.telemetry)} telemetry "
        f"rows, {len(corpus.cgm)} CGM readings, {len(corpus.detections)} detections"
    )
    return corpus


def write_corpus(corpus: SyntheticCorpus, directory: Path) -> dict[str, Path]:
    """Writes every input family as CSV; keys are the configuration path keys."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return {
        "TELEMETRY_PATH": write_telemetry(corpus.telemetry, directory / "telemetry.csv"),
        "CGM_PATH": write_cgm(corpus.cgm, directory / "cgm.csv"),
        "DETECTIONS_PATH": write_detections(corpus.detections, directory / "detections.csv"),
        "INTERSECTIONS_PATH": write_intersection_db(
            corpus.intersection_db, directory / "intersections.csv"
        ),
        "ANNOTATIONS_PATH": write_annotations(corpus.annotations, directory / "annotations.csv"),
        "ROSTER_PATH": write_roster(corpus.roster, directory / "roster.csv"),
    }
