from stopsafe.ingest import (
    ParticipantType,
    cross_validate,
    group_drives,
    load_aux,
    load_cgm,
    load_telemetry,
)
from stopsafe.synthetic import GAP_DRIVE, PLANS, generate_corpus, write_corpus


def test_generate_corpus_is_seeded():
    first, second = generate_corpus(seed=3), generate_corpus(seed=3)

    assert first.telemetry == second.telemetry
    assert first.cgm == second.cgm
    assert first.detections == second.detections
    assert generate_corpus(seed=4).telemetry != first.telemetry


def test_generate_corpus_shape():
    """
    Given: The default seed
    When: A corpus is generated
    Then: Every planned participant drives once per planned episode, control
          participants have no CGM and the gap drive lacks glucose coverage
    """
    corpus = generate_corpus()
    drives = group_drives(corpus.telemetry)

    assert [r.participant_id for r in corpus.roster] == [p.participant_id for p in PLANS]
    assert len(drives) == sum(len(p.episodes) for p in PLANS)
    controls = {p.participant_id for p in PLANS if p.participant_type == ParticipantType.CONTROL}
    assert not controls & {r.participant_id for r in corpus.cgm}

    gap = drives[GAP_DRIVE]
    readings = [r.timestamp for r in corpus.cgm if r.participant_id == gap[0].participant_id]
    covered = [t for t in readings if gap[0].timestamp - 360 <= t <= gap[-1].timestamp]
    assert covered == []


def test_write_corpus_loads_back(tmp_path):
    """
    Given: A written synthetic corpus
    When: Its files are loaded with the regular loaders
    Then: Records survive and telemetry passes the cross-table checks
    """
    corpus = generate_corpus(seed=1)
    paths = write_corpus(corpus, tmp_path)

    telemetry = load_telemetry(paths["TELEMETRY_PATH"])
    detections, aux = load_aux(
        detections_path=paths["DETECTIONS_PATH"],
        intersections_path=paths["INTERSECTIONS_PATH"],
        annotations_path=paths["ANNOTATIONS_PATH"],
        roster_path=paths["ROSTER_PATH"],
    )

    assert len(telemetry) == len(corpus.telemetry)
    assert len(load_cgm(paths["CGM_PATH"])) == len(corpus.cgm)
    assert len(detections) == len(corpus.detections)
    assert set(aux.roster) == {p.participant_id for p in PLANS}
    assert len(aux.annotations) == len(corpus.annotations)
    cross_validate(telemetry, aux)
