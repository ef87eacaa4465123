import asyncio
import logging
from dataclasses import asdict, dataclass, field

import pandas as pd

from report import fit_block, lrt_block
from stopsafe.encounters import BehaviorRow
from stopsafe.exceptions import (
    CompleteSeparationError,
    DegenerateGroupsError,
    EmptyPartitionError,
    InvalidParameterError,
)
from stopsafe.glmm import (
    PARTITIONS,
    FitSummary,
    LrtResult,
    MelrFit,
    ModelSpec,
    PartitionSpec,
    RandomFactor,
    fit_melr,
    lrt_compare,
    partition_rows,
    partition_table,
    summarize_fit,
)

from .base import PipelineContext, StageBase

logger = logging.getLogger(__name__)

REDUCED = (RandomFactor.PARTICIPANT,)
FULL = (RandomFactor.PARTICIPANT, RandomFactor.INTERSECTION)
REDUCED_LABEL = "+".join(REDUCED)
FULL_LABEL = "+".join(FULL)

# Failures that leave one partition unfitted without stopping the run
PARTITION_ERRORS = (
    EmptyPartitionError,
    CompleteSeparationError,
    DegenerateGroupsError,
    InvalidParameterError,
)


@dataclass
class ModelResult:
    partition: PartitionSpec
    rows: list[BehaviorRow] = field(default_factory=list)
    specs: dict[str, ModelSpec] = field(default_factory=dict)
    fits: dict[str, MelrFit] = field(default_factory=dict)
    summaries: dict[str, FitSummary] = field(default_factory=dict)
    lrt: LrtResult | None = None
    selected: str | None = None
    error: str | None = None
    alpha: float = 0.05

    @property
    def fitted(self) -> bool:
        return self.selected is not None

    @property
    def selected_spec(self) -> ModelSpec:
        return self.specs[self.selected]

    @property
    def selected_fit(self) -> MelrFit:
        return self.fits[self.selected]

    def block(self) -> dict:
        block = {
            "description": self.partition.description,
            "fixed_factor": self.partition.fixed_factor.value,
            "reference_level": self.partition.reference_level,
            "rows": len(self.rows),
            "levels": partition_table(self.rows, self.partition) if self.rows else [],
            "fits": {label: fit_block(s) for label, s in self.summaries.items()},
            "selected": self.selected,
            "error": self.error,
        }
        if self.lrt is not None:
            block["lrt"] = lrt_block(self.lrt, self.alpha)
        return block


class StageModels(StageBase):
    def __init__(self, context: PipelineContext):
        super().__init__(context)

        self.rows: list[BehaviorRow] = []

    async def extract(self):
        self.rows = list(self.context.behavior_rows)
        logger.info(f"Modelling {len(self.rows)} behavior rows in {len(PARTITIONS)} partitions")

    async def transform(self):
        """
        For every partition, fits participant-only and participant+intersection
        random intercepts, compares them by likelihood ratio and keeps the
        participant+intersection model when p < LRT_ALPHA.
        """
        for name in PARTITIONS:
            result = await asyncio.to_thread(self._fit_partition, name)
            if result.error:
                self.report.warn(f"Partition [{name}] not fitted: {result.error}")
            self.context.models[name] = result

    def _fit(self, result: ModelResult, random_factors) -> MelrFit:
        spec = result.partition.model(random_factors)
        fit = fit_melr(
            result.rows, spec, tol=self.config.glmm_tol, max_iter=self.config.glmm_max_iter
        )
        result.specs[spec.label] = spec
        result.fits[spec.label] = fit
        result.summaries[spec.label] = summarize_fit(fit)
        return fit

    def _fit_partition(self, name: str) -> ModelResult:
        result = ModelResult(PARTITIONS[name], alpha=self.config.lrt_alpha)
        try:
            result.rows = partition_rows(self.rows, name)
            reduced = self._fit(result, REDUCED)
        except PARTITION_ERRORS as exc:
            result.error = str(exc)
            return result

        result.selected = REDUCED_LABEL
        try:
            full = self._fit(result, FULL)
        except PARTITION_ERRORS as exc:
            self.report.warn(
                f"Partition [{name}]: participant+intersection model not fitted ({exc}); "
                f"keeping participant-only model"
            )
            return result

        result.lrt = lrt_compare(reduced, full)
        if result.lrt.p < self.config.lrt_alpha:
            result.selected = FULL_LABEL
        logger.info(
            f"Partition [{name}]: LRT chi2={result.lrt.chi2:.3f} df={result.lrt.df} "
            f"p={result.lrt.p:.4f}; selected [{result.selected}]"
        )
        return result

    async def load(self):
        records = []
        for name, result in self.context.models.items():
            for label, summary in result.summaries.items():
                records += [
                    {
                        "partition": name,
                        "model": label,
                        "selected": label == result.selected,
                        **asdict(row),
                    }
                    for row in summary.or_table
                ]
        self.save(
            pd.DataFrame(
                records,
                columns=[
                    "partition",
                    "model",
                    "selected",
                    "name",
                    "beta",
                    "se",
                    "odds_ratio",
                    "ci_low",
                    "ci_high",
                    "p",
                ],
            ),
            "model_estimates",
        )
        self.report.record(
            self.name,
            {"partitions": {name: r.block() for name, r in self.context.models.items()}},
        )
