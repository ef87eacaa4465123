import numpy as np
import pytest

from stopsafe.exceptions import OutOfEnvelopeError
from stopsafe.geo import (
    EARTH_RADIUS_M,
    GeoPoint,
    LocalPoint,
    centroid,
    connected_regions,
    from_local,
    haversine_m,
    path_distance,
    to_local,
)

ORIGIN = GeoPoint(41.25, -95.93)


def test_haversine_half_circumference():
    """
    Given: Two points on the equator 180 degrees apart
    When: `haversine_m()` is called
    Then: The distance is half the earth's circumference
    """
    distance = haversine_m(GeoPoint(0, 0), GeoPoint(0, 180))
    assert distance == pytest.approx(np.pi * EARTH_RADIUS_M)
    assert distance == pytest.approx(20_015_086.796, abs=1e-3)


def test_haversine_symmetric_and_zero_on_self():
    a, b = GeoPoint(41.25, -95.93), GeoPoint(41.26, -95.91)
    assert haversine_m(a, a) == 0.0
    assert haversine_m(a, b) == pytest.approx(haversine_m(b, a))


@pytest.mark.parametrize("lat, lon", [(91.0, 0.0), (-90.5, 0.0), (0.0, 180.1)])
def test_geopoint_rejects_out_of_range(lat, lon):
    with pytest.raises(ValueError):
        GeoPoint(lat, lon)


def test_to_local_matches_haversine_nearby():
    """
    Given: A point about 300 m north-east of the origin
    When: It is projected with `to_local()`
    Then: Its planar distance from the origin matches the great-circle distance
    """
    point = GeoPoint(ORIGIN.lat + 0.002, ORIGIN.lon + 0.0025)
    (local,) = to_local([point], ORIGIN)

    assert np.hypot(local.x, local.y) == pytest.approx(haversine_m(ORIGIN, point), rel=1e-3)
    assert local.x > 0 and local.y > 0


def test_from_local_inverts_to_local():
    points = [GeoPoint(ORIGIN.lat + d, ORIGIN.lon - d) for d in (0.0, 0.001, 0.01, 0.1)]
    for point, local in zip(points, to_local(points, ORIGIN)):
        back = from_local(local)
        assert back.lat == pytest.approx(point.lat, abs=1e-9)
        assert back.lon == pytest.approx(point.lon, abs=1e-9)


def test_to_local_out_of_envelope():
    """
    Given: A point roughly 330 km from the projection origin
    When: `to_local()` is called
    Then: Raise OutOfEnvelopeError
    """
    with pytest.raises(OutOfEnvelopeError, match="km from projection origin"):
        to_local([ORIGIN, GeoPoint(ORIGIN.lat + 3.0, ORIGIN.lon)], ORIGIN)


def test_centroid_is_mean():
    assert centroid([GeoPoint(0, 0), GeoPoint(2, 4)]) == GeoPoint(1, 2)
    with pytest.raises(ValueError):
        centroid([])


def test_path_distance_cumulative():
    """
    Given: A trajectory that stands still and then moves
    When: `path_distance()` is called
    Then: Distances start at 0, never decrease and add up step by step
    """
    traj = [
        ORIGIN,
        ORIGIN,
        GeoPoint(ORIGIN.lat + 0.001, ORIGIN.lon),
        GeoPoint(ORIGIN.lat + 0.002, ORIGIN.lon),
    ]
    d = path_distance(traj)

    assert d[0] == 0.0
    assert d[1] == 0.0
    assert np.all(np.diff(d) >= 0)
    assert d[-1] == pytest.approx(haversine_m(ORIGIN, traj[-1]), rel=1e-9)


def test_path_distance_single_point():
    np.testing.assert_array_equal(path_distance([ORIGIN]), [0.0])


def random_points(rng, n: int, lat_range=(-80, 80), lon_range=(-180, 180)) -> list[GeoPoint]:
    return [
        GeoPoint(float(lat), float(lon))
        for lat, lon in zip(rng.uniform(*lat_range, n), rng.uniform(*lon_range, n))
    ]


def great_circle_midpoint(a: GeoPoint, b: GeoPoint) -> GeoPoint:
    """Midpoint of the shorter great-circle arc between a and b"""

    def unit(p: GeoPoint) -> np.ndarray:
        lat, lon = np.radians(p.lat), np.radians(p.lon)
        return np.array([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])

    m = unit(a) + unit(b)
    m /= np.linalg.norm(m)
    return GeoPoint(float(np.degrees(np.arcsin(m[2]))), float(np.degrees(np.arctan2(m[1], m[0]))))


def test_haversine_triangle_inequality():
    rng = np.random.default_rng(11)
    for a, b, c in zip(*(random_points(rng, 500) for _ in range(3))):
        direct = haversine_m(a, c)
        detour = haversine_m(a, b) + haversine_m(b, c)
        assert direct <= detour * (1 + 1e-9) + 1e-9


def test_path_distance_midpoint_insertion():
    """
    Given: Random pairs of points up to a few hundred kilometers apart
    When: The great-circle midpoint is inserted between them
    Then: The total path length is unchanged
    """
    rng = np.random.default_rng(12)
    starts = random_points(rng, 100, lat_range=(-60, 60), lon_range=(-170, 170))
    for a in starts:
        b = GeoPoint(a.lat + rng.uniform(-2, 2), a.lon + rng.uniform(-2, 2))
        direct = path_distance([a, b])[-1]
        via = path_distance([a, great_circle_midpoint(a, b), b])[-1]
        assert via == pytest.approx(direct, rel=1e-6)


def test_connected_regions():
    """
    Given: A chain of points 40 m apart, a lone point 500 km away and a pair
           100 m apart near the chain
    When: `connected_regions()` links points at most 50 m apart
    Then: The chain forms one region, the others their own, ordered by
          smallest index
    """
    chain = [from_local(LocalPoint(40.0 * k, 0.0, ORIGIN)) for k in range(5)]
    far = GeoPoint(41.13, -101.93)
    pair = [from_local(LocalPoint(0.0, 1000.0, ORIGIN)), from_local(LocalPoint(0.0, 1100.0, ORIGIN))]

    regions = connected_regions([far] + chain + pair, radius_m=50.0)

    assert [list(r) for r in regions] == [[0], [1, 2, 3, 4, 5], [6], [7]]
    assert connected_regions([], 50.0) == []
