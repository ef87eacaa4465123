from unittest.mock import patch

import pytest

from config import PipelineConfig
from inputs import AsyncInputLoader, InputBundle
from stopsafe.exceptions import UnknownParticipantError
from stopsafe.ingest import (
    AuxTables,
    GlucoseReading,
    ParticipantType,
    RosterEntry,
    TelemetrySample,
)

TELEMETRY = [TelemetrySample(10, "P01", "D1", 41.25, -95.93, 3.0)]
CGM = [GlucoseReading(0, "P01", 120.0)]
AUX = AuxTables(roster={"P01": RosterEntry("P01", ParticipantType.T1DM)})


@pytest.mark.asyncio
async def test_load_all_families():
    """
    Given: A loader for every input family
    When: `load()` is called
    Then: Every loader runs once and the bundle carries their results
    """
    with patch("inputs.load_telemetry", return_value=TELEMETRY) as mocked_telemetry, patch(
        "inputs.load_cgm", return_value=CGM
    ) as mocked_cgm, patch("inputs.load_aux", return_value=([], AUX)) as mocked_aux:
        bundle = await AsyncInputLoader(PipelineConfig()).load()

    mocked_telemetry.assert_called_once()
    mocked_cgm.assert_called_once()
    mocked_aux.assert_called_once()
    assert bundle.telemetry == TELEMETRY
    assert bundle.cgm == CGM
    assert bundle.detections == []
    assert bundle.counts() == {
        "telemetry_rows": 1,
        "cgm_readings": 1,
        "detections": 0,
        "database_intersections": 0,
        "annotations": 0,
        "roster_participants": 1,
    }


@pytest.mark.asyncio
async def test_for_stages_loads_only_needed_families():
    """
    Given: A configuration that runs only the cgm stage
    When: The loader is built with `for_stages()`
    Then: Telemetry is never read
    """
    config = PipelineConfig(stages=("cgm",))
    with patch("inputs.load_telemetry") as mocked_telemetry, patch(
        "inputs.load_cgm", return_value=CGM
    ), patch("inputs.load_aux", return_value=([], AUX)):
        loader = AsyncInputLoader.for_stages(config)
        bundle = await loader.load()

    assert loader.families == ["cgm", "aux"]
    mocked_telemetry.assert_not_called()
    assert bundle.telemetry is None


@pytest.mark.asyncio
async def test_load_cross_validates_telemetry():
    stranger = [TelemetrySample(10, "P09", "D1", 41.25, -95.93, 3.0)]
    with patch("inputs.load_telemetry", return_value=stranger), patch(
        "inputs.load_aux", return_value=([], AUX)
    ):
        with pytest.raises(UnknownParticipantError, match="P09"):
            await AsyncInputLoader(PipelineConfig(), ["telemetry", "aux"]).load()


def test_unknown_family():
    with pytest.raises(ValueError, match="weather"):
        AsyncInputLoader(PipelineConfig(), ["weather"])


def test_empty_bundle_counts():
    assert InputBundle().counts() == {}
