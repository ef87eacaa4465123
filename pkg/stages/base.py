import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import pandas as pd

import utils
from config import PipelineConfig
from inputs import InputBundle
from report import RunReport
from stopsafe.cgm import ComplianceReport, GlucoseSeries
from stopsafe.encounters import BehaviorRow, Encounter
from stopsafe.exceptions import StageError
from stopsafe.fusion import FusedDrive
from stopsafe.intersections import IntersectionInventory

logger = logging.getLogger(__name__)


@dataclass
class PipelineContext:
    """
    State handed from stage to stage during one run
    """

    config: PipelineConfig
    report: RunReport = field(default_factory=RunReport)
    inputs: InputBundle = field(default_factory=InputBundle)
    inventory: IntersectionInventory | None = None
    series: dict[str, GlucoseSeries] = field(default_factory=dict)
    compliance: list[ComplianceReport] = field(default_factory=list)
    drives: list[FusedDrive] = field(default_factory=list)
    encounters: list[Encounter] = field(default_factory=list)
    selected: list[Encounter] = field(default_factory=list)
    behavior_rows: list[BehaviorRow] = field(default_factory=list)
    # Partition name -> stages.models.ModelResult
    models: dict = field(default_factory=dict)


class StageBase(ABC):
    """
    Base class for pipeline stages
    """

    def __init__(self, context: PipelineContext):
        self.name = self.__class__.__name__.lower()[5:]
        self.context = context
        self.config = context.config
        self.report = context.report

    @abstractmethod
    async def extract(self, *args, **kwargs):
        pass

    @abstractmethod
    async def transform(self, *args, **kwargs):
        pass

    @abstractmethod
    async def load(self, *args, **kwargs):
        pass

    def save(self, df: pd.DataFrame, name: str):
        utils.save_dataframe(
            df=df,
            name=name,
            output_format=self.config.output_format,
            output_path=self.config.output_path,
        )

    async def run(self):
        """
        Runs the stage, recording its wall time in the report.

        :raises StageError: Wrapping any failure, with the stage name.
        """
        logger.info(f"Starting stage [{self.name}]")
        start = time.perf_counter()
        try:
            await self.extract()
            await self.transform()
            await self.load()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(self.name, exc) from exc

        elapsed = time.perf_counter() - start
        self.report.timings[self.name] = elapsed
        logger.info(f"Finished stage [{self.name}] in {elapsed:.3f} seconds")
