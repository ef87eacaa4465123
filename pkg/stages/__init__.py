from .base import PipelineContext, StageBase
from .cgm import StageCgm
from .encounters import StageEncounters
from .fusion import StageFusion
from .influence import StageInfluence
from .intersections import StageIntersections
from .models import ModelResult, StageModels

STAGES: dict[str, type[StageBase]] = {
    "intersections": StageIntersections,
    "cgm": StageCgm,
    "fusion": StageFusion,
    "encounters": StageEncounters,
    "models": StageModels,
    "influence": StageInfluence,
}

__all__ = (
    "STAGES",
    "ModelResult",
    "PipelineContext",
    "StageBase",
    "StageCgm",
    "StageEncounters",
    "StageFusion",
    "StageInfluence",
    "StageIntersections",
    "StageModels",
)
