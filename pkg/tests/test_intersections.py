import numpy as np
import pytest

from stopsafe.exceptions import InvalidParameterError
from stopsafe.geo import GeoPoint, LocalPoint, centroid, from_local, haversine_m, to_local
from stopsafe.ingest import ControlType, DetectionRecord, IntersectionRecord
from stopsafe.intersections import NOISE, build_intersections, dbscan, geometric_median

ORIGIN = GeoPoint(41.25, -95.93)


def local(xy) -> list[LocalPoint]:
    return [LocalPoint(float(x), float(y), ORIGIN) for x, y in xy]


def detections_around(point: GeoPoint, n: int, spread_m: float, rng, drive="D1"):
    """Stop sign detections scattered around ``point``"""
    dlat = spread_m / 111_195.0
    return [
        DetectionRecord(
            timestamp=1000 + i,
            participant_id="P01",
            drive_id=drive,
            lat=point.lat + rng.uniform(-dlat, dlat),
            lon=point.lon + rng.uniform(-dlat, dlat),
            class_label="stop_sign",
            confidence=0.9,
        )
        for i in range(n)
    ]


def reference_dbscan(xy: np.ndarray, eps: float, min_pts: int):
    """Noise set, core partition and core adjacency from the full eps-neighbor graph"""
    d = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=2)
    adjacent = d <= eps
    core = adjacent.sum(axis=1) >= min_pts

    component = np.full(len(xy), -1)
    for start in np.flatnonzero(core):
        if component[start] >= 0:
            continue
        component[start] = start
        stack = [start]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adjacent[i] & core):
                if component[j] < 0:
                    component[j] = start
                    stack.append(j)

    noise = {i for i in range(len(xy)) if not core[i] and not (adjacent[i] & core).any()}
    return core, component, noise, adjacent


def test_dbscan_two_clusters_and_noise():
    """
    Given: Two tight groups of points and one isolated point
    When: `dbscan()` is called
    Then: Two clusters are found in input order and the isolated point is noise
    """
    xy = [(0, 0), (1, 0), (0, 1), (100, 100), (101, 100), (100, 101), (500, 500)]
    assignment = dbscan(local(xy), eps=2.0, min_pts=3)

    assert assignment.cluster_count == 2
    assert assignment.noise_count == 1
    assert list(assignment.labels) == [0, 0, 0, 1, 1, 1, NOISE]
    np.testing.assert_array_equal(assignment.members(1), [3, 4, 5])


def test_dbscan_eps_is_inclusive():
    assignment = dbscan(local([(0, 0), (5, 0)]), eps=5.0, min_pts=2)
    assert list(assignment.labels) == [0, 0]


def test_dbscan_border_point_joins_cluster():
    """
    Given: A chain where the end point has too few neighbors to be core
    When: `dbscan()` is called
    Then: The end point is a border member of the cluster, not noise
    """
    assignment = dbscan(local([(0, 0), (1, 0), (2, 0), (3, 0)]), eps=1.0, min_pts=3)

    assert list(assignment.labels) == [0, 0, 0, 0]
    assert list(assignment.core) == [False, True, True, False]


def test_dbscan_empty_and_invalid():
    assert dbscan([], eps=1.0, min_pts=3).cluster_count == 0
    with pytest.raises(InvalidParameterError):
        dbscan(local([(0, 0)]), eps=0.0, min_pts=3)
    with pytest.raises(InvalidParameterError):
        dbscan(local([(0, 0)]), eps=1.0, min_pts=0)


@pytest.mark.parametrize("eps", [10.0, 30.0, 50.0])
@pytest.mark.parametrize("min_pts", [3, 5])
def test_dbscan_matches_neighbor_graph(eps, min_pts):
    """
    Given: Random 200-point instances
    When: `dbscan()` is compared with the full eps-neighbor graph
    Then: Noise agrees exactly, core points are partitioned identically up to
          relabeling and every border point joins a cluster of a core neighbor
    """
    rng = np.random.default_rng(int(eps) * 10 + min_pts)
    for _ in range(10):
        centers = rng.uniform(0, 1000, size=(6, 2))
        xy = np.vstack(
            [c + rng.normal(0, 25, size=(30, 2)) for c in centers]
            + [rng.uniform(0, 1000, size=(20, 2))]
        )
        labels = dbscan(local(xy), eps=eps, min_pts=min_pts).labels
        core, component, noise, adjacent = reference_dbscan(xy, eps, min_pts)

        assert set(np.flatnonzero(labels == NOISE)) == noise

        core_ids = np.flatnonzero(core)
        mapping = {}
        for i in core_ids:
            assert mapping.setdefault(labels[i], component[i]) == component[i]
        assert len(mapping) == len(set(component[core_ids]))

        for i in np.flatnonzero(~core & (labels != NOISE)):
            neighbors = np.flatnonzero(adjacent[i] & core)
            assert labels[i] in set(labels[neighbors])


def test_geometric_median_unit_square():
    fit = geometric_median(local([(0, 0), (1, 0), (0, 1), (1, 1)]), tol=1e-9)

    assert fit.converged
    assert fit.center.x == pytest.approx(0.5, abs=1e-6)
    assert fit.center.y == pytest.approx(0.5, abs=1e-6)


def test_geometric_median_at_data_point():
    """
    Given: Three collinear points
    When: `geometric_median()` is called
    Then: The optimum is the middle data point
    """
    fit = geometric_median(local([(0, 0), (1, 0), (10, 0)]), tol=1e-9)

    assert fit.converged
    assert fit.center.x == pytest.approx(1.0, abs=1e-6)
    assert fit.center.y == pytest.approx(0.0, abs=1e-6)


def test_geometric_median_single_and_repeated_point():
    fit = geometric_median(local([(3, 4), (3, 4)]))
    assert (fit.center.x, fit.center.y) == pytest.approx((3, 4))

    with pytest.raises(ValueError):
        geometric_median([])


def grid_oracle(xy: np.ndarray) -> np.ndarray:
    """Two-stage grid search for the point minimizing the sum of distances"""

    def search(x_axis, y_axis):
        gx, gy = np.meshgrid(x_axis, y_axis)
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        cost = np.linalg.norm(grid[:, None, :] - xy[None, :, :], axis=2).sum(axis=1)
        return grid[np.argmin(cost)]

    lo, hi = xy.min(axis=0), xy.max(axis=0)
    coarse = search(np.linspace(lo[0], hi[0], 201), np.linspace(lo[1], hi[1], 201))
    step = (hi - lo) / 200
    return search(
        np.linspace(coarse[0] - 2 * step[0], coarse[0] + 2 * step[0], 401),
        np.linspace(coarse[1] - 2 * step[1], coarse[1] + 2 * step[1], 401),
    )


def test_geometric_median_matches_grid_oracle():
    """
    Given: Random sets of 3 to 20 points in the unit square
    When: `geometric_median()` is called
    Then: The center is within 1e-3 of the grid-search optimum and the
          objective never increases between iterations
    """
    rng = np.random.default_rng(7)
    for _ in range(50):
        xy = rng.uniform(0, 1, size=(rng.integers(3, 21), 2))
        fit = geometric_median(local(xy), tol=1e-9, max_iter=5000)

        expected = grid_oracle(xy)
        assert np.hypot(fit.center.x - expected[0], fit.center.y - expected[1]) < 1e-3
        assert np.all(np.diff(fit.objective) <= 1e-12)


def test_geometric_median_not_converged(caplog):
    fit = geometric_median(local([(0, 0), (1, 0), (0, 1), (5, 7)]), tol=1e-12, max_iter=2)

    assert not fit.converged
    assert fit.n_iter == 2
    assert "did not converge" in caplog.text


def test_build_intersections_reconciles_with_database():
    """
    Given: Two detection clusters, one next to a database intersection, an
           unrelated database intersection and a lone noise detection
    When: `build_intersections()` is called
    Then: The matched cluster takes the database id and control type, the
          other gets a generated id, the unmatched database entry is kept with
          support 0 and the noise detection is rejected
    """
    rng = np.random.default_rng(1)
    matched = GeoPoint(41.25, -95.93)
    unmatched = GeoPoint(41.26, -95.93)
    far = GeoPoint(41.30, -95.90)

    detections = (
        detections_around(matched, 8, 3.0, rng)
        + detections_around(unmatched, 6, 3.0, rng)
        + detections_around(GeoPoint(41.27, -95.95), 1, 0.0, rng)
    )
    database = [
        IntersectionRecord("SI-01", matched.lat + 0.00005, matched.lon, ControlType.ALL_WAY),
        IntersectionRecord("SI-09", far.lat, far.lon, ControlType.MINOR_ROAD_ONLY),
    ]
    inventory = build_intersections(detections, database, eps=10.0, min_pts=5, merge_radius=25.0)

    by_id = {i.id: i for i in inventory.intersections}
    assert sorted(by_id) == ["C0001", "SI-01", "SI-09"]

    assert by_id["SI-01"].source == "database"
    assert by_id["SI-01"].control_type == ControlType.ALL_WAY
    assert by_id["SI-01"].support == 8
    assert by_id["SI-01"].center == GeoPoint(matched.lat + 0.00005, matched.lon)

    assert by_id["C0001"].source == "clustered"
    assert by_id["C0001"].control_type == ControlType.UNKNOWN
    assert by_id["C0001"].support == 6
    assert haversine_m(by_id["C0001"].center, unmatched) < 4.0

    assert by_id["SI-09"].support == 0
    assert len(inventory.rejects) == 1

    counts = inventory.counts()
    assert counts["intersections"] == 3
    assert counts["noise_detections"] == 1
    assert counts["source_database"] == 2
    assert list(inventory.frame().columns) == [
        "id",
        "lat",
        "lon",
        "control_type",
        "source",
        "support",
    ]


def test_build_intersections_ignores_other_classes():
    rng = np.random.default_rng(2)
    cars = [
        DetectionRecord(1, "P01", "D1", 41.25, -95.93, "vehicle", 0.9) for _ in range(10)
    ]
    inventory = build_intersections(cars, [], eps=10.0, min_pts=3)

    assert inventory.intersections == []
    assert inventory.assignment is None

    signs = detections_around(GeoPoint(41.25, -95.93), 5, 2.0, rng)
    assert len(build_intersections(signs + cars, [], eps=10.0, min_pts=3).intersections) == 1


def test_build_intersections_keeps_database_entries_apart(caplog):
    """
    Given: Two database intersections 10 m apart
    When: `build_intersections()` is called with a 25 m merge radius
    Then: Only the first by id is kept and the conflict is logged
    """
    a = GeoPoint(41.25, -95.93)
    b = from_local(LocalPoint(10.0, 0.0, a))
    database = [
        IntersectionRecord("SI-02", b.lat, b.lon, ControlType.ALL_WAY),
        IntersectionRecord("SI-01", a.lat, a.lon, ControlType.ALL_WAY),
    ]
    inventory = build_intersections([], database)

    assert [i.id for i in inventory.intersections] == ["SI-01"]
    assert "keeping [SI-01]" in caplog.text


def test_build_intersections_across_distant_regions():
    """
    Given: Two tight blobs of stop sign detections about 450 km apart, farther
           than one local projection can span
    When: `build_intersections()` is called
    Then: Each blob is clustered around its own origin and both intersections
          are found with their full support
    """
    rng = np.random.default_rng(5)
    east = GeoPoint(41.25, -95.93)
    west = GeoPoint(41.13, -101.3)
    assert haversine_m(east, west) > 400_000

    detections = detections_around(east, 10, 3.0, rng) + detections_around(
        west, 10, 3.0, rng, drive="D2"
    )
    inventory = build_intersections(detections, [], eps=50.0, min_pts=5)

    assert [i.id for i in inventory.intersections] == ["C0001", "C0002"]
    assert [i.support for i in inventory.intersections] == [10, 10]
    centers = sorted((i.center for i in inventory.intersections), key=lambda c: c.lon)
    assert haversine_m(centers[0], west) < 4.0
    assert haversine_m(centers[1], east) < 4.0

    assignment = inventory.assignment
    assert assignment.cluster_count == 2
    assert assignment.noise_count == 0
    # candidates sort by latitude, so the western blob is scanned first
    assert set(assignment.labels[:10]) == {0}
    assert set(assignment.labels[10:]) == {1}


def test_build_intersections_regions_match_single_scan():
    """
    Given: Detections inside one projection envelope, spread over several blobs
           and noise
    When: Clustering runs region by region
    Then: Labels match one DBSCAN scan over the whole set
    """
    rng = np.random.default_rng(6)
    detections = []
    for k, point in enumerate([GeoPoint(41.25, -95.93), GeoPoint(41.252, -95.93), GeoPoint(41.3, -95.8)]):
        detections += detections_around(point, 6 + k, 20.0, rng, drive=f"D{k}")
    detections += detections_around(GeoPoint(41.28, -95.9), 3, 2000.0, rng, drive="noise")

    inventory = build_intersections(detections, [], eps=30.0, min_pts=4)

    candidates = sorted(detections, key=lambda d: (d.lat, d.lon, d.timestamp))
    points = [GeoPoint(d.lat, d.lon) for d in candidates]

    single = dbscan(to_local(points, centroid(points)), eps=30.0, min_pts=4)
    np.testing.assert_array_equal(inventory.assignment.labels, single.labels)
    np.testing.assert_array_equal(inventory.assignment.core, single.core)
