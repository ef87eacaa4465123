"""
Geodesic primitives on a spherical earth: great-circle distance, a local
equirectangular projection for metric clustering, and cumulative path length.
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .exceptions import OutOfEnvelopeError

EARTH_RADIUS_M = 6_371_000.0
LOCAL_ENVELOPE_M = 200_000.0


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"Latitude [{self.lat}] outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"Longitude [{self.lon}] outside [-180, 180]")


@dataclass(frozen=True, slots=True)
class LocalPoint:
    x: float
    y: float
    origin: GeoPoint


def haversine_arrays(lat1, lon1, lat2, lon2) -> np.ndarray:
    """
    Vectorized haversine distance in meters; arguments broadcast like numpy.
    """
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))

    dlat = lat2 - lat1
    dlon = lon2 - lon1

    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    # Clip guards against a creeping just above 1 for antipodal points
    c = 2 * np.arctan2(np.sqrt(a), np.sqrt(np.clip(1 - a, 0.0, None)))

    return EARTH_RADIUS_M * c


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """
    Great-circle distance in meters between two points.

    Examples:
        - haversine_m(GeoPoint(0, 0), GeoPoint(0, 180)) -> 20015086.796...
    """
    return float(haversine_arrays(a.lat, a.lon, b.lat, b.lon))


def connected_regions(points: Sequence[GeoPoint], radius_m: float) -> list[np.ndarray]:
    """
    Splits points into the connected components of the graph that links any
    two points at most ``radius_m`` apart. Each region can then be projected
    around its own centroid.

    Links are found on earth-centered coordinates, where the chord never
    exceeds the arc, so no pair within ``radius_m`` is missed.

    :return: Sorted index arrays, one per region, ordered by smallest index.
    """
    n = len(points)
    if n == 0:
        return []

    lats = np.radians(np.fromiter((p.lat for p in points), dtype=float))
    lons = np.radians(np.fromiter((p.lon for p in points), dtype=float))
    xyz = EARTH_RADIUS_M * np.column_stack(
        (np.cos(lats) * np.cos(lons), np.cos(lats) * np.sin(lons), np.sin(lats))
    )

    pairs = cKDTree(xyz).query_pairs(r=radius_m, output_type="ndarray")
    graph = sparse.coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    _, labels = connected_components(graph, directed=False)

    regions = [np.flatnonzero(labels == label) for label in np.unique(labels)]
    return sorted(regions, key=lambda region: region[0])


def centroid(points: Sequence[GeoPoint]) -> GeoPoint:
    """Arithmetic mean of latitudes and longitudes, used as projection origin."""
    if not points:
        raise ValueError("Cannot take the centroid of no points")
    lats = np.fromiter((p.lat for p in points), dtype=float)
    lons = np.fromiter((p.lon for p in points), dtype=float)
    return GeoPoint(float(lats.mean()), float(lons.mean()))


def to_local(points: Sequence[GeoPoint], origin: GeoPoint) -> list[LocalPoint]:
    """
    Equirectangular projection around ``origin``:
    x = R * dlon * cos(lat_origin), y = R * dlat (radians).

    :raises OutOfEnvelopeError: If a point lies more than 200 km from origin.
    """
    if not points:
        return []

    lats = np.fromiter((p.lat for p in points), dtype=float)
    lons = np.fromiter((p.lon for p in points), dtype=float)

    distances = haversine_arrays(lats, lons, origin.lat, origin.lon)
    if (far := np.flatnonzero(distances > LOCAL_ENVELOPE_M)).size:
        i = int(far[0])
        raise OutOfEnvelopeError(
            f"Point {i} ({lats[i]:.6f}, {lons[i]:.6f}) is "
            f"{distances[i] / 1000:.1f} km from projection origin; "
            f"limit is {LOCAL_ENVELOPE_M / 1000:.0f} km"
        )

    xs, ys = project_arrays(lats, lons, origin)
    return [LocalPoint(float(x), float(y), origin) for x, y in zip(xs, ys)]


def project_arrays(
    lats: np.ndarray, lons: np.ndarray, origin: GeoPoint
) -> tuple[np.ndarray, np.ndarray]:
    """Array form of the projection without the envelope check."""
    cos_lat = np.cos(np.radians(origin.lat))
    x = EARTH_RADIUS_M * np.radians(np.asarray(lons) - origin.lon) * cos_lat
    y = EARTH_RADIUS_M * np.radians(np.asarray(lats) - origin.lat)
    return x, y


def from_local(point: LocalPoint) -> GeoPoint:
    """Inverse of :func:`to_local` for a single point."""
    origin = point.origin
    cos_lat = np.cos(np.radians(origin.lat))
    lat = origin.lat + np.degrees(point.y / EARTH_RADIUS_M)
    lon = origin.lon + np.degrees(point.x / (EARTH_RADIUS_M * cos_lat))
    return GeoPoint(float(lat), float(lon))


def path_distance(traj: Sequence[GeoPoint]) -> np.ndarray:
    """
    Cumulative great-circle distance along an ordered trajectory.

    :return: Array of length len(traj); first entry 0, non-decreasing.
    """
    if not traj:
        raise ValueError("path_distance needs at least one point")

    lats = np.fromiter((p.lat for p in traj), dtype=float)
    lons = np.fromiter((p.lon for p in traj), dtype=float)
    return path_distance_arrays(lats, lons)


def path_distance_arrays(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    steps = haversine_arrays(lats[:-1], lons[:-1], lats[1:], lons[1:])
    return np.concatenate(([0.0], np.cumsum(steps)))
