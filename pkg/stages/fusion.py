import asyncio
import logging

from stopsafe.fusion import FusedDrive, fuse_drive, fusion_frame, fusion_summary
from stopsafe.ingest import ParticipantType, RosterEntry, TelemetrySample, group_drives

from .base import PipelineContext, StageBase

logger = logging.getLogger(__name__)


class StageFusion(StageBase):
    def __init__(self, context: PipelineContext):
        super().__init__(context)

        self.drives: dict[str, list[TelemetrySample]] = {}
        self.roster: dict[str, RosterEntry] = {}

    async def extract(self):
        """
        Splits telemetry into drives
        """
        self.drives = group_drives(self.context.inputs.telemetry or [])
        self.roster = self.context.inputs.aux.roster
        logger.info(f"Extracted {len(self.drives)} drives")

    async def transform(self):
        """
        Joins step-held glucose onto every drive and discards T1DM drives with
        too little glucose coverage
        """
        self.context.drives = await asyncio.to_thread(self._fuse_all)

    def _fuse_all(self) -> list[FusedDrive]:
        return [
            fuse_drive(
                samples,
                self.context.series.get(samples[0].participant_id),
                self.roster[samples[0].participant_id].participant_type,
                staleness=self.config.staleness,
                discard_threshold=self.config.discard_threshold,
            )
            for samples in self.drives.values()
        ]

    async def load(self):
        drives = self.context.drives
        self.save(fusion_frame(drives), "fusion_drives")

        n_drives, n_discarded, fraction = fusion_summary(drives)
        t1dm = [d for d in drives if d.participant_type == ParticipantType.T1DM]
        self.report.record(
            self.name,
            {
                "drives": n_drives,
                "t1dm_drives": len(t1dm),
                "discarded": n_discarded,
                "discard_fraction": fraction,
                "samples": sum(len(d) for d in drives),
            },
        )
        logger.info(f"Discarded {n_discarded} of {n_drives} drives for missing glucose")
