from collections import Counter

import numpy as np
import pytest

from stopsafe.cgm import Episode
from stopsafe.encounters import (
    APPROACHES,
    ENCOUNTER_COLUMNS,
    OVERLAPPING_WINDOW,
    Behavior,
    Encounter,
    annotate,
    apply_selection,
    behavior_counts,
    binarize,
    classify_stop,
    detect_encounters,
    encounters_frame,
    exclusion_reason,
    per_participant,
    selection_table,
    stop_metrics,
)
from stopsafe.exceptions import EmptyWindowError, InvalidParameterError
from stopsafe.fusion import fuse_drive
from stopsafe.geo import GeoPoint, LocalPoint, from_local
from stopsafe.ingest import (
    Annotation,
    AuxTables,
    ControlType,
    ParticipantType,
    TelemetrySample,
    TrafficStatus,
    YesNo,
)
from stopsafe.intersections import Intersection

ORIGIN = GeoPoint(41.25, -95.93)

CRUISE = [10.0] * 20
FULL_STOP = [7.0, 4.0, 1.0] + [0.0] * 4 + [1.5, 3.0, 4.5, 6.0, 7.5, 9.0]


def hz10(speeds_1hz_before, stationary_samples, speeds_1hz_after):
    """10 Hz profile: decelerate, hold below 0.5 m/s, accelerate"""
    return (
        list(np.repeat(speeds_1hz_before, 10))
        + [0.1] * stationary_samples
        + list(np.repeat(speeds_1hz_after, 10))
    )


FULL_PROFILES = [
    [8, 5, 2, 0.2, 0.2, 0.3, 4, 8],
    [10, 6, 2] + [0.0] * 2 + [3, 6],
    [10, 6, 2] + [0.0] * 3 + [3, 6],
    [10, 6, 2] + [0.4] * 6 + [3, 6],
    [10, 10, 10, 0.0, 0.0, 10, 10],
    [2.0, 0.0, 0.0],
] + [hz10([10, 5, 2], n, [2, 5]) for n in (20, 21, 25, 30)]

ROLLING_PROFILES = [
    [10, 7, 4, 2, 5, 9],
    [10, 6, 2, 0.2, 3, 6],
    [10, 6, 2, 0.2, 1, 0.3, 3, 6],
    [10, 8.9, 10],
    [10, 0.5, 0.5, 0.5, 10],
    [5, 1, 5],
    [10, 6, 3, 6, 10],
] + [hz10([10, 5, 2], n, [2, 5]) for n in (19, 15, 10)]

NO_STOP_PROFILES = [
    [10, 10, 10, 10],
    [10, 9.5, 9.2, 9.5, 10],
    [10, 11, 12],
    [12, 11, 10.9],
    [0.95, 0.95, 1.0],
    [0.9, 0.9, 0.9],
    [20, 19, 18.5],
    [5, 4.6, 5],
    [3, 2.9, 2.8, 2.75],
    [15] * 30,
]


@pytest.mark.parametrize(
    "speeds, expected",
    [(p, Behavior.FULL) for p in FULL_PROFILES]
    + [(p, Behavior.ROLLING) for p in ROLLING_PROFILES]
    + [(p, Behavior.NO_STOP) for p in NO_STOP_PROFILES],
)
def test_classify_stop_profiles(speeds, expected):
    """
    Given: A speed profile sampled at 1 Hz, or at 10 Hz when longer than 40 samples
    When: `classify_stop()` is called with the entry speed as the first sample
    Then: full wins over no_stop, which wins over rolling
    """
    sample_period = 0.1 if len(speeds) > 40 else 1.0
    assert classify_stop(speeds, speeds[0], sample_period=sample_period) == expected


def test_classify_stop_stationary_boundary():
    """
    Given: 1.9 s and 2.0 s below the stationary threshold at 10 Hz
    When: `classify_stop()` is called
    Then: Only 2.0 s is a full stop
    """
    assert classify_stop(hz10([8], 19, [8]), 8, sample_period=0.1) == Behavior.ROLLING
    assert classify_stop(hz10([8], 20, [8]), 8, sample_period=0.1) == Behavior.FULL


def test_stop_metrics():
    assert stop_metrics([5, 0.2, 0.1, 3, 0.0]) == (0.0, 2.0)
    with pytest.raises(EmptyWindowError):
        stop_metrics([])


def build_drive(path_y, speeds, drive_id="D1", participant_id="P03"):
    """Fused control drive along the local y axis, 1.5 m right of center line"""
    samples = []
    for t, (y, speed) in enumerate(zip(path_y, speeds)):
        point = from_local(LocalPoint(1.5, float(y), ORIGIN))
        samples.append(
            TelemetrySample(1000 + t, participant_id, drive_id, point.lat, point.lon, float(speed))
        )
    return fuse_drive(samples, None, ParticipantType.CONTROL)


def straight_drive(speeds, start_y=-200.0):
    y = start_y + np.concatenate(([0.0], np.cumsum(speeds[:-1])))
    return build_drive(y, speeds)


def intersection_at(y: float, id="SI-01") -> Intersection:
    return Intersection(id, from_local(LocalPoint(0.0, y, ORIGIN)), ControlType.ALL_WAY, "database", 0)


def test_detect_encounters_full_stop():
    """
    Given: A drive that stops for four seconds just before an intersection
    When: `detect_encounters()` is called
    Then: One full-stop encounter is found with the closest sample as anchor
    """
    speeds = CRUISE + FULL_STOP + CRUISE
    drive = straight_drive(speeds, start_y=-212.0)
    (encounter,) = detect_encounters(drive, [intersection_at(0.0)])

    assert encounter.ordinal == 1
    assert encounter.intersection_id == "SI-01"
    assert encounter.behavior == Behavior.FULL
    assert encounter.stationary_s >= 4.0
    assert encounter.nearest_approach_m < 10.0
    assert encounter.episode == Episode.CONTROL
    assert encounter.v_entry == pytest.approx(encounter.window[0][0].speed)
    assert encounter.window[0][0].timestamp <= encounter.timestamp <= encounter.window[-1][0].timestamp


def test_detect_encounters_window_spans_upstream_and_downstream():
    drive = straight_drive([10.0] * 60)
    (encounter,) = detect_encounters(
        drive, [intersection_at(0.0)], upstream_m=91.44, downstream_m=60.96
    )

    stamps = [s.timestamp for s, _, _ in encounter.window]
    # 10 m per sample: about 9 samples upstream, 6 downstream, plus the anchor
    assert 15 <= len(stamps) <= 17


def test_detect_encounters_orders_by_time():
    drive = straight_drive(CRUISE * 3, start_y=-100.0)
    encounters = detect_encounters(
        drive, [intersection_at(300.0, "SI-A"), intersection_at(0.0, "SI-B")]
    )

    assert [e.intersection_id for e in encounters] == ["SI-B", "SI-A"]
    assert [e.ordinal for e in encounters] == [1, 2]
    assert all(e.behavior == Behavior.NO_STOP for e in encounters)


@pytest.mark.parametrize("refractory_s, expected", [(60, 1), (10, 2)])
def test_detect_encounters_refractory(refractory_s, expected):
    """
    Given: An out-and-back drive passing the same intersection twice 20 s apart
    When: `detect_encounters()` is called
    Then: Passes within the refractory interval collapse into one encounter
    """
    out = np.arange(-100.0, 101.0, 10.0)
    y = np.concatenate((out, out[::-1][1:]))
    drive = build_drive(y, [10.0] * len(y))

    encounters = detect_encounters(drive, [intersection_at(0.0)], refractory_s=refractory_s)
    assert len(encounters) == expected


def test_detect_encounters_counts_overlapping_approaches():
    """
    Given: A drive that turns around 20 m past an intersection and passes it
           again 4 s later, with a refractory interval shorter than that
    When: `detect_encounters()` is called with a tally
    Then: The second approach starts inside the first window, so it is not
          emitted but is counted as skipped
    """
    out = np.arange(-100.0, 21.0, 10.0)
    y = np.concatenate((out, out[::-1][1:]))
    drive = build_drive(y, [10.0] * len(y))
    tally = Counter()

    encounters = detect_encounters(drive, [intersection_at(0.0)], refractory_s=2, tally=tally)

    assert len(encounters) == 1
    assert tally == Counter({APPROACHES: 2, OVERLAPPING_WINDOW: 1})
    assert len(encounters) == tally[APPROACHES] - tally[OVERLAPPING_WINDOW]


def test_detect_encounters_outside_capture_radius():
    drive = straight_drive(CRUISE)
    far = Intersection("SI-F", from_local(LocalPoint(40.0, -100.0, ORIGIN)), ControlType.ALL_WAY, "database", 0)

    assert detect_encounters(drive, [far]) == []
    with pytest.raises(InvalidParameterError):
        detect_encounters(drive, [far], capture_radius=0.0)


def make_encounter(
    behavior=Behavior.FULL,
    episode=Episode.NORMAL,
    participant_id="P01",
    ordinal=1,
    **flags,
) -> Encounter:
    return Encounter(
        participant_id=participant_id,
        participant_type=ParticipantType.CONTROL if episode == Episode.CONTROL else ParticipantType.T1DM,
        drive_id=f"{participant_id}-D1",
        intersection_id="SI-01",
        ordinal=ordinal,
        timestamp=1000 + ordinal,
        nearest_approach_m=1.0,
        v_entry=10.0,
        v_min=0.0,
        stationary_s=3.0,
        behavior=behavior,
        episode=episode,
        glucose=120.0,
        window=[],
        **flags,
    )


def test_annotate_applies_flags_and_defaults():
    encounters = [make_encounter(ordinal=1), make_encounter(ordinal=2)]
    aux = AuxTables(
        annotations={
            ("P01-D1", 2): Annotation(
                "P01-D1", 2, lead_vehicle=TrafficStatus.PRESENT_WITH_EFFECT
            )
        }
    )
    first, second = annotate(encounters, aux)

    assert first.lead_vehicle == TrafficStatus.NONE
    assert second.lead_vehicle == TrafficStatus.PRESENT_WITH_EFFECT
    assert exclusion_reason(first) is None
    assert exclusion_reason(second) == "lead_vehicle_effect"


@pytest.mark.parametrize(
    "flags, reason",
    [
        ({}, None),
        ({"lead_vehicle": TrafficStatus.PRESENT_WITHOUT_EFFECT}, None),
        ({"crossing_vehicle": TrafficStatus.PRESENT_WITH_EFFECT}, "crossing_vehicle_effect"),
        ({"crossing_pedestrian": TrafficStatus.PRESENT_WITH_EFFECT}, "crossing_pedestrian_effect"),
        (
            {
                "is_primary_driver": YesNo.NO,
                "lead_vehicle": TrafficStatus.PRESENT_WITH_EFFECT,
            },
            "not_primary_driver",
        ),
    ],
)
def test_selection_rules(flags, reason):
    """
    Given: An encounter with the given annotation flags
    When: The selection rules are applied
    Then: It is excluded for the first rule it fails, or kept
    """
    encounter = make_encounter(**flags)

    assert exclusion_reason(encounter) == reason
    assert apply_selection([encounter]) == ([] if reason else [encounter])


def test_binarize(caplog):
    """
    Given: Selected encounters of every behavior, one without glucose episode
           and one in moderate hyperglycemia
    When: `binarize()` is called
    Then: full maps to 0 and rolling/no_stop to 1, the missing episode is
          dropped and moderate hyperglycemia is kept but excluded from models
    """
    encounters = [
        make_encounter(Behavior.FULL, ordinal=1),
        make_encounter(Behavior.ROLLING, ordinal=2),
        make_encounter(Behavior.NO_STOP, Episode.SEVERE_HYPER, ordinal=3),
        make_encounter(Behavior.FULL, Episode.MISSING, ordinal=4),
        make_encounter(Behavior.ROLLING, Episode.MODERATE_HYPER, ordinal=5),
    ]
    rows = binarize(encounters)

    assert [r.unsafe for r in rows] == [0, 1, 1, 1]
    assert [r.excluded_from_models for r in rows] == [False, False, False, True]
    assert rows[0].drive_id == "P01-D1" and rows[0].timestamp == 1001
    assert "Dropped 1 encounter(s)" in caplog.text


def test_summary_tables():
    encounters = [
        make_encounter(Behavior.FULL, participant_id="P01", ordinal=1),
        make_encounter(Behavior.ROLLING, participant_id="P01", ordinal=2),
        make_encounter(
            Behavior.NO_STOP,
            Episode.CONTROL,
            participant_id="P02",
            ordinal=1,
            crossing_vehicle=TrafficStatus.PRESENT_WITH_EFFECT,
        ),
    ]

    counts = behavior_counts(encounters)
    assert counts == {
        "control": {"full": 0, "rolling": 0, "no_stop": 1},
        "normal": {"full": 1, "rolling": 1, "no_stop": 0},
    }

    table = selection_table(encounters)
    with_effect = table["crossing_vehicle"]["present_with_effect"]
    assert with_effect["unsafe"] == {"n": 1, "pct": 50.0}
    assert with_effect["safe"] == {"n": 0, "pct": 0.0}
    assert table["is_primary_driver"]["yes"]["total"]["n"] == 3

    assert per_participant(encounters) == {"participants": 2, "mean": 1.5, "min": 1, "max": 2}
    assert per_participant([]) == {"participants": 0}

    frame = encounters_frame(encounters)
    assert list(frame.columns) == ENCOUNTER_COLUMNS
    assert frame["excluded_by"].tolist() == ["", "", "crossing_vehicle_effect"]
