import numpy as np
import pytest

from stopsafe.cgm import (
    PHYSIOLOGIC_RATE,
    Episode,
    GlucoseSeries,
    classify_episode,
    classify_many,
    clean_series,
    compliance,
    compliance_summary,
    glucose_at,
    glucose_at_many,
)
from stopsafe.exceptions import InvalidWindowError, UnorderedInputError
from stopsafe.ingest import GlucoseReading, ParticipantType

T1DM = ParticipantType.T1DM


def series(pairs, participant_id="P01") -> list[GlucoseReading]:
    return [GlucoseReading(t, participant_id, float(g)) for t, g in pairs]


@pytest.mark.parametrize("change", [0.10, 0.249, 0.25, 0.251, 0.40])
@pytest.mark.parametrize("gap_s", [300, 900, 960])
@pytest.mark.parametrize("direction", [1, -1])
def test_clean_series_rate_boundary(change, gap_s, direction):
    """
    Given: Two readings `gap_s` apart with a relative change of `change`
    When: `clean_series()` is called
    Then: The second reading is removed only when the gap is at most 15 minutes
          and the change is strictly above 25%
    """
    raw = series([(0, 100.0), (gap_s, 100.0 * (1 + direction * change))])
    cleaned = clean_series(raw)

    expected_removed = gap_s <= 900 and change > 0.25
    assert len(cleaned.removed) == int(expected_removed)
    assert len(cleaned.readings) == 2 - int(expected_removed)
    if expected_removed:
        assert cleaned.removed[0] == (raw[1], PHYSIOLOGIC_RATE)


def test_clean_series_keeps_retained_comparator():
    """
    Given: A spike followed by a return to the previous level
    When: `clean_series()` is called
    Then: Only the spike is removed; the next reading is compared with the
          last retained one, not with the spike
    """
    raw = series([(0, 100), (300, 200), (600, 110), (900, 115)])
    cleaned = clean_series(raw)

    assert [r.glucose for r in cleaned.readings] == [100, 110, 115]
    assert [r.timestamp for r, _ in cleaned.removed] == [300]


def test_clean_series_gap_resets_comparator():
    cleaned = clean_series(series([(0, 100), (1000, 200), (1300, 210)]))
    assert not cleaned.removed


def test_clean_series_idempotent():
    """
    Given: Random glucose series with spikes
    When: `clean_series()` is applied to its own output
    Then: Nothing more is removed
    """
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        times = np.cumsum(rng.choice([300, 300, 300, 600, 1200], size=n))
        values = np.clip(120 * np.exp(rng.normal(0, 0.25, size=n)), 40, 400)
        once = clean_series(series(zip(times.tolist(), values.tolist())))
        twice = clean_series(once.readings)

        assert twice.readings == once.readings
        assert twice.removed == []


def test_clean_series_rejects_unordered_input():
    with pytest.raises(UnorderedInputError, match="strictly increasing"):
        clean_series(series([(300, 100), (300, 101)]))
    with pytest.raises(UnorderedInputError, match="P02"):
        clean_series(series([(0, 100)]) + series([(300, 100)], "P02"))


def test_clean_series_empty():
    cleaned = clean_series([])
    assert cleaned.readings == [] and cleaned.removed == []


def test_removals_frame():
    cleaned = clean_series(series([(0, 100), (300, 200)]))
    frame = cleaned.removals_frame()

    assert list(frame.columns) == ["participant_id", "timestamp", "glucose", "reason"]
    assert frame.iloc[0].to_dict() == {
        "participant_id": "P01",
        "timestamp": 300,
        "glucose": 200.0,
        "reason": PHYSIOLOGIC_RATE,
    }


@pytest.mark.parametrize("missing_slots, meets_fda", [(2, True), (3, False)])
def test_compliance(missing_slots, meets_fda):
    """
    Given: A 10-slot wear window with some slots lacking readings
    When: `compliance()` is called
    Then: The missing fraction counts empty slots and FDA compliance needs
          strictly less than 25% missing
    """
    raw = series([(slot * 300 + 10, 120) for slot in range(missing_slots, 10)])
    report = compliance(raw, wear_start=0, wear_end=3000)

    assert report.expected_slots == 10
    assert report.observed_slots == 10 - missing_slots
    assert report.missing_fraction == pytest.approx(missing_slots / 10)
    assert report.meets_fda is meets_fda
    assert report.removed_fraction == 0.0


def test_compliance_counts_removed_fraction_and_slots_once():
    raw = series([(0, 100), (100, 101), (300, 300), (600, 102)])
    report = compliance(raw, wear_start=0, wear_end=900)

    assert report.observed_slots == 3
    assert report.removed_fraction == pytest.approx(0.25)


def test_compliance_invalid_window():
    with pytest.raises(InvalidWindowError):
        compliance(series([(0, 100)]), wear_start=100, wear_end=100)


def test_compliance_summary():
    reports = [
        compliance(series([(0, 100), (300, 100)]), 0, 600),
        compliance(series([(0, 100)]), 0, 600),
    ]
    summary = compliance_summary(reports)

    assert summary["participants"] == 2
    assert summary["missing_pct_mean"] == pytest.approx(25.0)
    assert summary["missing_pct_max"] == pytest.approx(50.0)
    assert summary["meeting_fda"] == 1
    assert compliance_summary([]) == {"participants": 0}


def expected_episode(glucose: int) -> Episode:
    if glucose <= 70:
        return Episode.HYPO
    if glucose <= 179:
        return Episode.NORMAL
    if glucose <= 299:
        return Episode.MODERATE_HYPER
    return Episode.SEVERE_HYPER


def test_classify_episode_integer_sweep():
    """
    Given: Every integer glucose value from 40 to 400 mg/dL
    When: Classified for a T1DM participant
    Then: Every value lands in its bin and the scalar and array forms agree
    """
    values = np.arange(40, 401)
    expected = [expected_episode(int(v)) for v in values]

    assert [classify_episode(float(v), T1DM) for v in values] == expected
    assert classify_many(values, T1DM) == expected


def test_classify_episode_control_and_missing():
    assert classify_episode(50.0, ParticipantType.CONTROL) == Episode.CONTROL
    assert classify_episode(None, ParticipantType.CONTROL) == Episode.CONTROL
    assert classify_episode(None, T1DM) == Episode.MISSING
    assert classify_many(np.array([np.nan, 65.0]), T1DM) == [Episode.MISSING, Episode.HYPO]


def test_glucose_at_step_hold():
    """
    Given: Retained readings at t=0 and t=300
    When: `glucose_at()` is queried around them with a 360 s staleness bound
    Then: The latest reading at or before t is held until it is 360 s old
    """
    held = GlucoseSeries("P01", series([(0, 100), (300, 150)]))

    assert glucose_at(held, -1) is None
    assert glucose_at(held, 0) == 100.0
    assert glucose_at(held, 299) == 100.0
    assert glucose_at(held, 300) == 150.0
    assert glucose_at(held, 660) == 150.0
    assert glucose_at(held, 661) is None


def test_glucose_at_many_matches_scalar():
    held = GlucoseSeries("P01", series([(0, 100), (300, 150), (1200, 90)]))
    times = np.arange(-50, 1700, 37)
    values = glucose_at_many(held, times)

    for t, value in zip(times, values):
        scalar = glucose_at(held, int(t))
        assert (np.isnan(value) and scalar is None) or value == scalar


def test_glucose_at_without_series():
    assert glucose_at(None, 10) is None
    with pytest.raises(ValueError):
        glucose_at(None, 10, staleness=0)
