import numpy as np
import pytest
from scipy.special import expit

from stopsafe.cgm import Episode
from stopsafe.encounters import BehaviorRow
from stopsafe.ingest import ParticipantType


def pytest_addoption(parser):
    parser.addoption(
        "--update-golden",
        action="store_true",
        help="Rewrite tests/data/golden_report.json from a run on the seed 0 corpus",
    )


def behavior_row(
    participant_id: str,
    unsafe: int,
    participant_type: ParticipantType = ParticipantType.T1DM,
    episode: Episode | None = None,
    intersection_id: str = "SI-01",
    excluded_from_models: bool = False,
) -> BehaviorRow:
    if episode is None:
        episode = Episode.CONTROL if participant_type == ParticipantType.CONTROL else Episode.NORMAL
    return BehaviorRow(
        participant_id=participant_id,
        intersection_id=intersection_id,
        participant_type=participant_type,
        episode=episode,
        unsafe=int(unsafe),
        excluded_from_models=excluded_from_models,
    )


@pytest.fixture
def make_row():
    return behavior_row


@pytest.fixture
def patterned_rows():
    """
    Rows keyed by participant: ``patterns`` maps participant id to
    (participant type, outcomes)
    """

    def build(patterns):
        rows = []
        for participant_id, (participant_type, outcomes) in patterns.items():
            for n, unsafe in enumerate(outcomes):
                rows.append(
                    behavior_row(
                        participant_id,
                        unsafe,
                        participant_type,
                        intersection_id=f"SI-{n % 5:02d}",
                    )
                )
        return rows

    return build


@pytest.fixture
def simulated_rows():
    """
    Logistic data with a control / T1DM fixed effect and Gaussian random
    intercepts for participants and intersections
    """

    def simulate(
        seed: int = 0,
        n_participants: int = 40,
        n_rows: int = 30,
        beta: tuple[float, float] = (-0.5, np.log(2.0)),
        tau_participant: float = 0.5,
        tau_intersection: float = 0.0,
        n_intersections: int = 15,
    ) -> list[BehaviorRow]:
        rng = np.random.default_rng(seed)
        u = rng.normal(0.0, np.sqrt(tau_participant), size=n_participants)
        v = rng.normal(0.0, np.sqrt(tau_intersection), size=n_intersections)

        rows = []
        for p in range(n_participants):
            participant_type = ParticipantType.T1DM if p % 2 else ParticipantType.CONTROL
            is_t1dm = float(participant_type == ParticipantType.T1DM)
            for _ in range(n_rows):
                i = int(rng.integers(n_intersections))
                eta = beta[0] + beta[1] * is_t1dm + u[p] + v[i]
                rows.append(
                    behavior_row(
                        f"P{p:02d}",
                        rng.random() < expit(eta),
                        participant_type,
                        intersection_id=f"SI-{i:02d}",
                    )
                )
        return rows

    return simulate
