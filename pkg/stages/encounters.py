import asyncio
from collections import Counter
import logging

from stopsafe.encounters import (
    APPROACHES,
    OVERLAPPING_WINDOW,
    Encounter,
    annotate,
    apply_selection,
    behavior_counts,
    behavior_frame,
    binarize,
    detect_encounters,
    encounters_frame,
    exclusion_reason,
    per_participant,
    selection_table,
)
from stopsafe.fusion import FusedDrive

from .base import PipelineContext, StageBase

logger = logging.getLogger(__name__)

EXCLUSION_REASONS = (
    "not_primary_driver",
    "lead_vehicle_effect",
    "crossing_vehicle_effect",
    "crossing_pedestrian_effect",
)


class StageEncounters(StageBase):
    def __init__(self, context: PipelineContext):
        super().__init__(context)

        self.drives: list[FusedDrive] = []
        self.tally: Counter = Counter()

    async def extract(self):
        """
        Takes the fused drives that survived the glucose coverage check
        """
        self.drives = [d for d in self.context.drives if not d.discarded]
        logger.info(
            f"Scanning {len(self.drives)} of {len(self.context.drives)} drives for "
            f"encounters with {len(self.context.inventory.intersections)} intersections"
        )

    async def transform(self):
        """
        - Detects and classifies every stop encounter
        - Attaches annotation flags and applies the selection rules
        - Binarizes selected encounters into model rows
        """
        found = await asyncio.to_thread(self._detect_all)
        annotated = annotate(found, self.context.inputs.aux)
        self._check_annotations(annotated)

        self.context.encounters = annotated
        self.context.selected = apply_selection(annotated)
        self.context.behavior_rows = binarize(self.context.selected)

    def _detect_all(self) -> list[Encounter]:
        intersections = self.context.inventory.intersections
        self.tally = Counter()
        found = []
        for drive in self.drives:
            found += detect_encounters(
                drive,
                intersections,
                capture_radius=self.config.capture_radius,
                refractory_s=self.config.refractory_s,
                v_stop_eps=self.config.v_stop_eps,
                min_stop_s=self.config.min_stop_s,
                no_stop_ratio=self.config.no_stop_ratio,
                tally=self.tally,
            )
        return found

    def _check_annotations(self, encounters: list[Encounter]):
        emitted = {(e.drive_id, e.ordinal) for e in encounters}
        unmatched = sorted(set(self.context.inputs.aux.annotations) - emitted)
        if unmatched:
            self.report.warn(
                f"{len(unmatched)} annotation(s) match no detected encounter, "
                f"first {unmatched[0]}"
            )

    async def load(self):
        encounters = self.context.encounters
        selected = self.context.selected
        rows = self.context.behavior_rows

        self.save(encounters_frame(encounters), "encounters")
        self.save(behavior_frame(rows), "behavior_rows")

        reasons = [exclusion_reason(e) for e in encounters]
        excluded_by = {reason: reasons.count(reason) for reason in EXCLUSION_REASONS}
        excluded = sum(excluded_by.values())
        skipped_by = {OVERLAPPING_WINDOW: self.tally[OVERLAPPING_WINDOW]}
        candidates = self.tally[APPROACHES]
        if skipped_by[OVERLAPPING_WINDOW]:
            logger.warning(
                f"Skipped {skipped_by[OVERLAPPING_WINDOW]} approach(es) whose window "
                f"overlaps an earlier one at the same intersection"
            )
        self.report.record(
            self.name,
            {
                "drives_scanned": len(self.drives),
                "candidates": candidates,
                "skipped_by": skipped_by,
                "emitted": len(encounters),
                "selected": len(selected),
                "excluded": excluded,
                "excluded_by": excluded_by,
                "ledger_balanced": (
                    candidates == len(encounters) + sum(skipped_by.values())
                    and len(encounters) == len(selected) + excluded
                ),
                "missing_episode_dropped": len(selected) - len(rows),
                "model_excluded": sum(r.excluded_from_models for r in rows),
                "behavior_rows": len(rows),
                "behavior_by_episode": behavior_counts(selected),
                "selection": selection_table(encounters),
                "per_participant": per_participant(selected),
            },
        )
        logger.info(
            f"Emitted {len(encounters)} encounters, selected {len(selected)}, "
            f"excluded {excluded}"
        )
