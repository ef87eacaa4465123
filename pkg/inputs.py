import asyncio
import logging
from dataclasses import dataclass
from typing import Collection

from config import PipelineConfig
from stopsafe.ingest import (
    AuxTables,
    DetectionRecord,
    GlucoseReading,
    TelemetrySample,
    cross_validate,
    load_aux,
    load_cgm,
    load_telemetry,
)

logger = logging.getLogger(__name__)

FAMILIES = ("telemetry", "cgm", "aux")

# Input families each stage reads
STAGE_FAMILIES = {
    "intersections": ("aux",),
    "cgm": ("cgm", "aux"),
    "fusion": ("telemetry", "aux"),
    "encounters": ("telemetry", "aux"),
    "models": (),
    "influence": (),
}


@dataclass
class InputBundle:
    telemetry: list[TelemetrySample] | None = None
    cgm: list[GlucoseReading] | None = None
    detections: list[DetectionRecord] | None = None
    aux: AuxTables | None = None

    def counts(self) -> dict[str, int]:
        counts = {}
        if self.telemetry is not None:
            counts["telemetry_rows"] = len(self.telemetry)
        if self.cgm is not None:
            counts["cgm_readings"] = len(self.cgm)
        if self.detections is not None:
            counts["detections"] = len(self.detections)
        if self.aux is not None:
            counts["database_intersections"] = len(self.aux.intersection_db)
            counts["annotations"] = len(self.aux.annotations)
            counts["roster_participants"] = len(self.aux.roster)
        return counts


class AsyncInputLoader:
    """
    Loads input file families concurrently
    """

    def __init__(self, config: PipelineConfig, families: Collection[str] = FAMILIES):
        unknown = set(families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"Unknown input families {sorted(unknown)}")
        self.config = config
        self.families = [f for f in FAMILIES if f in families]

    @classmethod
    def for_stages(cls, config: PipelineConfig) -> "AsyncInputLoader":
        needed = {f for stage in config.stages for f in STAGE_FAMILIES[stage]}
        return cls(config, needed)

    async def load(self) -> InputBundle:
        """
        Parses every requested family in a worker thread and gathers the results.
        Telemetry and auxiliary tables are cross-checked when both are loaded.

        :return: InputBundle with the requested families set
        """
        tasks = [asyncio.to_thread(self._load, family) for family in self.families]
        results = await asyncio.gather(*tasks)

        bundle = InputBundle()
        for family, result in zip(self.families, results):
            if family == "aux":
                bundle.detections, bundle.aux = result
            else:
                setattr(bundle, family, result)

        if bundle.telemetry is not None and bundle.aux is not None:
            cross_validate(bundle.telemetry, bundle.aux)

        logger.info(f"Finished loading inputs {self.families}: {bundle.counts()}")
        return bundle

    def _load(self, family: str):
        """
        Loads a single input family.

        :param family: 'telemetry', 'cgm' or 'aux'
        """
        logger.debug(f"Loading [{family}] inputs")
        if family == "telemetry":
            return load_telemetry(self.config.telemetry_path)
        if family == "cgm":
            return load_cgm(self.config.cgm_path)
        return load_aux(
            detections_path=self.config.detections_path,
            intersections_path=self.config.intersections_path,
            annotations_path=self.config.annotations_path,
            roster_path=self.config.roster_path,
        )
