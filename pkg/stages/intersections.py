import asyncio
import logging

from stopsafe.ingest import DetectionRecord, IntersectionRecord
from stopsafe.intersections import build_intersections

from .base import PipelineContext, StageBase

logger = logging.getLogger(__name__)


class StageIntersections(StageBase):
    def __init__(self, context: PipelineContext):
        super().__init__(context)

        self.detections: list[DetectionRecord] | None = None
        self.database: list[IntersectionRecord] | None = None

    async def extract(self):
        """
        Takes stop sign detections and the intersection database from the
        loaded inputs
        """
        inputs = self.context.inputs
        self.detections = inputs.detections or []
        self.database = inputs.aux.intersection_db if inputs.aux else []
        logger.info(
            f"Extracted {len(self.detections)} detections and "
            f"{len(self.database)} database intersections"
        )

    async def transform(self):
        """
        Clusters detections and reconciles the cluster centers with the database
        """
        self.context.inventory = await asyncio.to_thread(
            build_intersections,
            self.detections,
            self.database,
            eps=self.config.eps,
            min_pts=self.config.min_pts,
            merge_radius=self.config.merge_radius,
            tol=self.config.geomedian_tol,
            max_iter=self.config.geomedian_max_iter,
        )

    async def load(self):
        inventory = self.context.inventory
        self.save(inventory.frame(), "intersections")
        self.save(inventory.rejects_frame(), "intersection_rejects")
        self.report.record(self.name, inventory.counts())
