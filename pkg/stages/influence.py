import asyncio
import logging

from report import fit_block
from stopsafe.exceptions import StopSafeError
from stopsafe.glmm import (
    InfluenceReport,
    ModelSpec,
    RandomFactor,
    cooks_groups,
    fit_melr,
    summarize_fit,
    without_group,
)

from .base import PipelineContext, StageBase
from .models import ModelResult

logger = logging.getLogger(__name__)


class StageInfluence(StageBase):
    """
    Group-deletion Cook's distance on every selected model. Flagged groups are
    refit without and both fits are reported; nothing is dropped automatically.
    """

    def __init__(self, context: PipelineContext):
        super().__init__(context)

        self.models: dict[str, ModelResult] = {}
        self.results: dict[str, dict[str, InfluenceReport]] = {}
        self.omitted: dict[str, dict[str, dict[str, dict]]] = {}

    async def extract(self):
        self.models = {name: r for name, r in self.context.models.items() if r.fitted}
        logger.info(f"Assessing influence in {len(self.models)} fitted partitions")

    async def transform(self):
        for name, result in self.models.items():
            spec = result.selected_spec
            self.results[name] = {}
            self.omitted[name] = {}
            for grouping in spec.random_factors:
                report = await asyncio.to_thread(
                    cooks_groups,
                    result.rows,
                    spec,
                    result.selected_fit,
                    grouping,
                    threshold=self.config.cooks_threshold,
                    tol=self.config.glmm_tol,
                    max_iter=self.config.glmm_max_iter,
                    max_workers=self.config.max_workers,
                )
                self.results[name][grouping] = report
                omitted = self.omitted[name][grouping] = {}
                for group in report.flagged:
                    omitted[group] = await asyncio.to_thread(
                        self._refit_without, result, spec, grouping, group
                    )
                if report.flagged:
                    logger.info(
                        f"Partition [{name}]: influential {grouping} groups {report.flagged}"
                    )

    def _refit_without(
        self, result: ModelResult, spec: ModelSpec, grouping: RandomFactor, group: str
    ) -> dict:
        rows = without_group(result.rows, grouping, group)
        try:
            fit = fit_melr(
                rows, spec, tol=self.config.glmm_tol, max_iter=self.config.glmm_max_iter
            )
        except StopSafeError as exc:
            self.report.warn(
                f"Partition [{result.partition.name}]: refit without {grouping} "
                f"[{group}] failed: {exc}"
            )
            return {"error": str(exc)}
        return fit_block(summarize_fit(fit))

    async def load(self):
        partitions = {}
        for name, by_grouping in self.results.items():
            result = self.models[name]
            groupings = {}
            for grouping, report in by_grouping.items():
                self.save(report.frame(), f"influence_{name}_{grouping}")
                groupings[grouping] = {
                    "cooks_d": report.cooks_d,
                    "flagged": report.flagged,
                    "threshold": report.threshold,
                    "failures": report.failures,
                    "omitted": self.omitted[name][grouping],
                }
            partitions[name] = {
                "model": result.selected,
                "preliminary": fit_block(result.summaries[result.selected]),
                "groupings": groupings,
            }
        self.report.record(self.name, {"partitions": partitions})
