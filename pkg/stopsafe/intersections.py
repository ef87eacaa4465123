"""
Stop intersection geolocation.

Stop sign detections are projected to a local metric plane, grouped with
DBSCAN, and each cluster is reduced to its geometric median (Weiszfeld
iteration). Cluster centers are then reconciled against an intersection
database, which is authoritative wherever the two agree.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

import settings

from .exceptions import InvalidParameterError
from .geo import (
    GeoPoint,
    LocalPoint,
    centroid,
    connected_regions,
    from_local,
    haversine_arrays,
    to_local,
)
from .ingest import ControlType, DetectionRecord, IntersectionRecord

logger = logging.getLogger(__name__)

NOISE = -1
REGION_SLACK = 1.05


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    cluster_count: int
    noise_count: int
    core: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, bool))

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)


@dataclass(frozen=True, slots=True)
class Intersection:
    id: str
    center: GeoPoint
    control_type: ControlType
    source: str  # "clustered" or "database"
    support: int


@dataclass(frozen=True)
class MedianFit:
    center: LocalPoint
    n_iter: int
    converged: bool
    objective: list[float] = field(repr=False)


@dataclass
class IntersectionInventory:
    intersections: list[Intersection]
    rejects: list[DetectionRecord]
    assignment: ClusterAssignment | None = None

    def counts(self) -> dict[str, int]:
        counts = {
            "intersections": len(self.intersections),
            "noise_detections": len(self.rejects),
            "clusters": 0 if self.assignment is None else self.assignment.cluster_count,
        }
        for key in ("clustered", "database"):
            counts[f"source_{key}"] = sum(i.source == key for i in self.intersections)
        for control_type in ControlType:
            counts[f"control_{control_type.value}"] = sum(
                i.control_type == control_type for i in self.intersections
            )
        return counts

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "id": i.id,
                    "lat": i.center.lat,
                    "lon": i.center.lon,
                    "control_type": i.control_type.value,
                    "source": i.source,
                    "support": i.support,
                }
                for i in self.intersections
            ],
            columns=["id", "lat", "lon", "control_type", "source", "support"],
        )

    def rejects_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "timestamp": d.timestamp,
                    "participant_id": d.participant_id,
                    "drive_id": d.drive_id,
                    "lat": d.lat,
                    "lon": d.lon,
                    "confidence": d.confidence,
                }
                for d in self.rejects
            ],
            columns=["timestamp", "participant_id", "drive_id", "lat", "lon", "confidence"],
        )


def _as_array(points: Sequence[LocalPoint]) -> np.ndarray:
    if not points:
        return np.zeros((0, 2))
    return np.array([(p.x, p.y) for p in points], dtype=float)


def _check_density(eps: float, min_pts: int):
    if eps <= 0:
        raise InvalidParameterError(f"eps must be positive, got {eps}")
    if min_pts < 1:
        raise InvalidParameterError(f"min_pts must be at least 1, got {min_pts}")


def dbscan(points: Sequence[LocalPoint], eps: float, min_pts: int) -> ClusterAssignment:
    """
    Density-based clustering.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps`` meters, inclusive. Clusters grow breadth-first from core
    points in input order; a border point joins the first cluster that reaches
    it. Cluster ids are contiguous in order of discovery.

    :raises InvalidParameterError: If eps <= 0 or min_pts < 1.
    """
    _check_density(eps, min_pts)

    xy = _as_array(points)
    n = len(xy)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return ClusterAssignment(labels, 0, 0, np.zeros(0, dtype=bool))

    tree = cKDTree(xy)
    neighbors = [sorted(ids) for ids in tree.query_ball_point(xy, r=eps)]
    core = np.array([len(ids) >= min_pts for ids in neighbors], dtype=bool)

    cluster_id = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue

        labels[i] = cluster_id
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in neighbors[j]:
                if labels[k] != NOISE:
                    continue
                labels[k] = cluster_id
                if core[k]:
                    queue.append(k)
        cluster_id += 1

    return ClusterAssignment(
        labels=labels,
        cluster_count=cluster_id,
        noise_count=int((labels == NOISE).sum()),
        core=core,
    )


def _objective(xy: np.ndarray, y: np.ndarray) -> float:
    return float(np.linalg.norm(xy - y, axis=1).sum())


def geometric_median(
    points: Sequence[LocalPoint],
    tol: float = settings.GEOMEDIAN_TOL,
    max_iter: int = settings.GEOMEDIAN_MAX_ITER,
) -> MedianFit:
    """
    Point minimizing the sum of Euclidean distances, by Weiszfeld iteration
    y <- sum(x_i / d_i) / sum(1 / d_i), started at the coordinate-wise mean.

    When an iterate comes within ``tol`` of a data point, that point is
    tested with the subgradient condition ||sum_{i != k} u_i|| <= m_k (u_i unit
    vectors towards the other points, m_k the multiplicity of the point). An
    optimal data point is returned as is; otherwise the iterate is pushed
    ``tol`` along the descent direction and iteration resumes.

    Non-convergence within ``max_iter`` returns the best iterate with
    ``converged=False`` and logs a warning.
    """
    if not points:
        raise ValueError("geometric_median needs at least one point")
    if tol <= 0:
        raise InvalidParameterError(f"tol must be positive, got {tol}")

    origin = points[0].origin
    xy = _as_array(points)

    y = xy.mean(axis=0)
    trace = [_objective(xy, y)]
    best, best_value = y, trace[0]

    for n_iter in range(1, max_iter + 1):
        d = np.linalg.norm(xy - y, axis=1)
        nearest = int(np.argmin(d))

        if d[nearest] < tol:
            anchor = xy[nearest]
            at_anchor = np.linalg.norm(xy - anchor, axis=1) < tol
            others = xy[~at_anchor] - anchor
            if not len(others):
                return MedianFit(LocalPoint(*anchor, origin), n_iter, True, trace)

            units = others / np.linalg.norm(others, axis=1)[:, None]
            resultant = units.sum(axis=0)
            pull = float(np.linalg.norm(resultant))
            if pull <= at_anchor.sum():
                trace.append(_objective(xy, anchor))
                return MedianFit(LocalPoint(*anchor, origin), n_iter, True, trace)

            y_next = anchor + tol * resultant / pull
        else:
            weights = 1.0 / d
            y_next = (xy * weights[:, None]).sum(axis=0) / weights.sum()

        value = _objective(xy, y_next)
        trace.append(value)
        if value <= best_value:
            best, best_value = y_next, value

        if np.linalg.norm(y_next - y) < tol:
            return MedianFit(LocalPoint(*y_next, origin), n_iter, True, trace)
        y = y_next

    logger.warning(
        f"Weiszfeld iteration did not converge in {max_iter} iterations "
        f"(tol={tol}); returning best iterate"
    )
    return MedianFit(LocalPoint(*best, origin), max_iter, False, trace)


def build_intersections(
    detections: Sequence[DetectionRecord],
    db: Sequence[IntersectionRecord],
    eps: float = settings.DBSCAN_EPS,
    min_pts: int = settings.DBSCAN_MIN_PTS,
    merge_radius: float = settings.MERGE_RADIUS,
    tol: float = settings.GEOMEDIAN_TOL,
    max_iter: int = settings.GEOMEDIAN_MAX_ITER,
) -> IntersectionInventory:
    """
    Builds the validated stop intersection list.

    - stop sign detections are sorted by (lat, lon, timestamp), split into
      eps-connected regions and clustered around each region's centroid
    - each cluster center is its geometric median, lifted back to lat/lon
    - a center within ``merge_radius`` of a database intersection takes the
      database id and control type
    - unmatched centers get generated ids ("C0001", ...) and unknown control type
    - every database intersection is retained; unmatched ones have support 0
    - no two retained intersections lie within ``merge_radius`` of each other;
      database entries win, then clustered centers by support

    Noise detections are returned in ``rejects``.
    """
    candidates = sorted(
        (d for d in detections if d.is_candidate),
        key=lambda d: (d.lat, d.lon, d.timestamp),
    )

    assignment = None
    clustered: list[tuple[GeoPoint, int]] = []
    rejects: list[DetectionRecord] = []

    if candidates:
        geo_points = [GeoPoint(d.lat, d.lon) for d in candidates]
        assignment, members_local = _cluster_regions(geo_points, eps, min_pts)

        for points in members_local:
            fit = geometric_median(points, tol=tol, max_iter=max_iter)
            clustered.append((from_local(fit.center), len(points)))

        rejects = [candidates[i] for i in np.flatnonzero(assignment.labels == NOISE)]
        logger.info(
            f"Clustered {len(candidates)} stop sign detections into "
            f"{assignment.cluster_count} clusters ({assignment.noise_count} noise)"
        )

    intersections = _reconcile(clustered, db, merge_radius)
    return IntersectionInventory(intersections, rejects, assignment)


def _cluster_regions(
    geo_points: Sequence[GeoPoint], eps: float, min_pts: int
) -> tuple[ClusterAssignment, list[list[LocalPoint]]]:
    """
    Runs DBSCAN separately on every eps-connected region, each projected
    around its own centroid. No cluster can span two regions, so the merged
    labels equal those of one scan over all points: clusters are numbered by
    their first core point in input order.

    :return: The merged assignment and the local members of each cluster.
    """
    n = len(geo_points)
    labels = np.full(n, NOISE, dtype=int)
    core = np.zeros(n, dtype=bool)
    found: list[tuple[int, np.ndarray, list[LocalPoint]]] = []

    _check_density(eps, min_pts)
    # Slack keeps pairs the projection shortens inside one region
    regions = connected_regions(geo_points, eps * REGION_SLACK)
    for region in regions:
        points = [geo_points[i] for i in region]
        local = to_local(points, centroid(points))
        assignment = dbscan(local, eps=eps, min_pts=min_pts)
        core[region] = assignment.core

        for cluster_id in range(assignment.cluster_count):
            members = assignment.members(cluster_id)
            seed = region[members[assignment.core[members]][0]]
            found.append((int(seed), region[members], [local[i] for i in members]))

    found.sort(key=lambda cluster: cluster[0])
    for cluster_id, (_, members, _) in enumerate(found):
        labels[members] = cluster_id

    if len(regions) > 1:
        logger.debug(f"Clustered {n} detections in {len(regions)} separate regions")
    merged = ClusterAssignment(
        labels=labels,
        cluster_count=len(found),
        noise_count=int((labels == NOISE).sum()),
        core=core,
    )
    return merged, [points for _, _, points in found]


def _reconcile(
    clustered: list[tuple[GeoPoint, int]],
    db: Sequence[IntersectionRecord],
    merge_radius: float,
) -> list[Intersection]:
    accepted: list[Intersection] = []
    lats: list[float] = []
    lons: list[float] = []

    def nearest(point: GeoPoint) -> tuple[int, float]:
        if not accepted:
            return -1, np.inf
        d = haversine_arrays(np.array(lats), np.array(lons), point.lat, point.lon)
        i = int(np.argmin(d))
        return i, float(d[i])

    for record in sorted(db, key=lambda r: r.id):
        point = GeoPoint(record.lat, record.lon)
        i, distance = nearest(point)
        if distance <= merge_radius:
            logger.warning(
                f"Database intersection [{record.id}] lies {distance:.1f} m from "
                f"[{accepted[i].id}]; keeping [{accepted[i].id}]"
            )
            continue
        accepted.append(
            Intersection(record.id, point, record.control_type, "database", 0)
        )
        lats.append(point.lat)
        lons.append(point.lon)

    # Strongest clusters claim database records and space first
    order = sorted(
        range(len(clustered)),
        key=lambda k: (-clustered[k][1], clustered[k][0].lat, clustered[k][0].lon),
    )
    generated = 0
    for k in order:
        point, support = clustered[k]
        i, distance = nearest(point)
        if distance <= merge_radius:
            match = accepted[i]
            logger.debug(
                f"Cluster of {support} detections within {distance:.1f} m of "
                f"[{match.id}] folded into it"
            )
            accepted[i] = Intersection(
                match.id,
                match.center,
                match.control_type,
                match.source,
                match.support + support,
            )
            continue

        generated += 1
        accepted.append(
            Intersection(
                f"C{generated:04d}", point, ControlType.UNKNOWN, "clustered", support
            )
        )
        lats.append(point.lat)
        lons.append(point.lon)

    return sorted(accepted, key=lambda i: i.id)
