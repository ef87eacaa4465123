import asyncio
import itertools
import logging
from dataclasses import asdict

import pandas as pd

from stopsafe.cgm import (
    ComplianceReport,
    GlucoseSeries,
    clean_series,
    compliance,
    compliance_summary,
)
from stopsafe.ingest import GlucoseReading, ParticipantType

from .base import PipelineContext, StageBase

logger = logging.getLogger(__name__)


class StageCgm(StageBase):
    def __init__(self, context: PipelineContext):
        super().__init__(context)

        self.readings: dict[str, list[GlucoseReading]] = {}
        self.absent: list[str] = []

    async def extract(self):
        """
        Groups raw CGM readings by participant and notes T1DM roster participants
        without any reading
        """
        raw = sorted(self.context.inputs.cgm or [], key=lambda r: (r.participant_id, r.timestamp))
        self.readings = {
            participant_id: list(group)
            for participant_id, group in itertools.groupby(raw, key=lambda r: r.participant_id)
        }

        aux = self.context.inputs.aux
        roster = aux.roster if aux else {}
        self.absent = []
        for participant_id in sorted(set(roster) - set(self.readings)):
            if roster[participant_id].participant_type != ParticipantType.T1DM:
                logger.debug(f"Control participant [{participant_id}] has no CGM readings")
                continue
            self.absent.append(participant_id)
            self.report.warn(f"Participant [{participant_id}] has no CGM readings")

    async def transform(self):
        """
        - Removes physiologically impossible readings per participant
        - Computes wear compliance from the first reading to one cadence past the last;
          T1DM participants without readings count as fully missing
        """
        series, reports = await asyncio.to_thread(self._clean_all)
        self.context.series = series
        self.context.compliance = reports

    def _clean_all(self) -> tuple[dict[str, GlucoseSeries], list[ComplianceReport]]:
        series = {}
        reports = []
        for participant_id, raw in self.readings.items():
            series[participant_id] = clean_series(
                raw,
                window_s=self.config.cgm_rate_window_s,
                max_rate=self.config.cgm_max_rate,
            )
            reports.append(
                compliance(
                    raw,
                    wear_start=raw[0].timestamp,
                    wear_end=raw[-1].timestamp + self.config.cgm_cadence_s,
                    cadence_s=self.config.cgm_cadence_s,
                )
            )
        reports += [ComplianceReport.absent(p) for p in self.absent]
        return series, sorted(reports, key=lambda r: r.participant_id)

    async def load(self):
        series = self.context.series
        removals = [s.removals_frame() for s in series.values()]
        removals = (
            pd.concat(removals, ignore_index=True)
            if removals
            else GlucoseSeries("", []).removals_frame()
        )
        self.save(removals, "cgm_removals")
        self.save(
            pd.DataFrame(
                [asdict(r) for r in self.context.compliance],
                columns=list(ComplianceReport.__dataclass_fields__),
            ),
            "cgm_compliance",
        )

        n_raw = sum(len(raw) for raw in self.readings.values())
        self.report.record(
            self.name,
            {
                "readings": n_raw,
                "retained": sum(len(s.readings) for s in series.values()),
                "removed": len(removals),
                "compliance": compliance_summary(self.context.compliance),
            },
        )
        logger.info(f"Removed {len(removals)} of {n_raw} CGM readings")
