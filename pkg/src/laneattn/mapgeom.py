"""Vector-map geometry: lanes, candidate search, agent frames, drivable area.

All coordinates are meters. Lanes live in the city frame; `Pose2` converts to
and from an agent-centric frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, GeometryError, LabelingError

DEFAULT_RADIUS = 30.0
DEFAULT_MAX_LANES = 6
DEFAULT_LANE_POINTS = 10
NS_HEADING_DEG = 30.0
NS_LATERAL_M = 2.0


@dataclass(frozen=True)
class Lane:
    id: str
    centerline: np.ndarray
    successors: tuple[str, ...] = ()
    predecessors: tuple[str, ...] = ()
    is_intersection: bool = False

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise GeometryError(f"lane {self.id}: centerline needs at least 2 points of (x, y)")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg == 0):
            raise GeometryError(f"lane {self.id}: consecutive centerline points coincide")
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "successors", tuple(self.successors))
        object.__setattr__(self, "predecessors", tuple(self.predecessors))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1).sum())


@dataclass
class LaneGraph:
    lanes: dict[str, Lane]
    drivable_area: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        polys = []
        for poly in self.drivable_area:
            p = np.asarray(poly, dtype=np.float64)
            if len(p) > 1 and np.array_equal(p[0], p[-1]):
                p = p[:-1]
            if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
                raise GeometryError("drivable-area polygon needs at least 3 distinct vertices")
            polys.append(p)
        self.drivable_area = polys
        self._lane_index: tuple | None = None
        self._poly_boxes: np.ndarray | None = None

    def validate(self, check_simple: bool = True) -> None:
        for lane in self.lanes.values():
            for ref in lane.successors + lane.predecessors:
                if ref not in self.lanes:
                    raise GeometryError(f"lane {lane.id} references unknown lane {ref}")
        if check_simple:
            for i, poly in enumerate(self.drivable_area):
                if not is_simple_polygon(poly):
                    raise GeometryError(f"drivable-area polygon {i} self-intersects")

    # spatial prefilters -------------------------------------------------
    def _lane_boxes(self):
        if self._lane_index is None:
            ids = sorted(self.lanes)
            boxes = np.array([np.concatenate([self.lanes[i].centerline.min(0), self.lanes[i].centerline.max(0)])
                              for i in ids]).reshape(-1, 4)
            self._lane_index = (ids, boxes)
        return self._lane_index

    def lanes_near(self, point, radius: float) -> list[Lane]:
        """Lanes whose bounding box lies within ``radius`` of ``point``."""
        ids, boxes = self._lane_boxes()
        if not ids:
            return []
        x, y = float(point[0]), float(point[1])
        dx = np.maximum(np.maximum(boxes[:, 0] - x, x - boxes[:, 2]), 0.0)
        dy = np.maximum(np.maximum(boxes[:, 1] - y, y - boxes[:, 3]), 0.0)
        hit = np.nonzero(dx * dx + dy * dy <= radius * radius)[0]
        return [self.lanes[ids[i]] for i in hit]

    def polygon_boxes(self) -> np.ndarray:
        if self._poly_boxes is None:
            self._poly_boxes = np.array([np.concatenate([p.min(0), p.max(0)]) for p in self.drivable_area]
                                        ).reshape(-1, 4)
        return self._poly_boxes

    # serialization ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "lanes": [
                {
                    "id": lane.id,
                    "centerline": lane.centerline.tolist(),
                    "successors": list(lane.successors),
                    "predecessors": list(lane.predecessors),
                    "is_intersection": bool(lane.is_intersection),
                }
                for lane in (self.lanes[k] for k in sorted(self.lanes))
            ],
            "drivable_area": [p.tolist() for p in self.drivable_area],
        }

    @classmethod
    def from_json(cls, doc: dict, validate: bool = True) -> LaneGraph:
        try:
            lanes = {}
            for item in doc["lanes"]:
                lane = Lane(
                    id=str(item["id"]),
                    centerline=np.asarray(item["centerline"], dtype=np.float64),
                    successors=tuple(str(s) for s in item.get("successors", ())),
                    predecessors=tuple(str(s) for s in item.get("predecessors", ())),
                    is_intersection=bool(item.get("is_intersection", False)),
                )
                if lane.id in lanes:
                    raise GeometryError(f"duplicate lane id {lane.id}")
                lanes[lane.id] = lane
            graph = cls(lanes, [np.asarray(p, dtype=np.float64) for p in doc.get("drivable_area", [])])
            if validate:
                graph.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed map document: {exc}") from exc
        except GeometryError as exc:
            raise DataError(f"invalid map: {exc}") from exc
        return graph

    @classmethod
    def load(cls, path, validate: bool = True) -> LaneGraph:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read map {path}: {exc}") from exc
        return cls.from_json(doc, validate=validate)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")))


@dataclass(frozen=True)
class Pose2:
    """Rigid frame: agent-frame point ``p`` maps to ``position + R(heading) p``."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, -s], [s, c]])

    def to_local(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.array([self.x, self.y])) @ self.rotation

    def to_world(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + np.array([self.x, self.y])

    def vectors_to_local(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation

    def vectors_to_world(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


def agent_pose(observed: np.ndarray, min_step: float = 0.1, recent: int = 10) -> Pose2:
    """Anchor pose at the last observed point.

    Heading follows the last displacement if it is at least ``min_step``,
    otherwise the longest of the last ``recent`` displacements, otherwise 0.
    """
    obs = np.asarray(observed, dtype=np.float64)
    last = obs[-1]
    heading = 0.0
    if len(obs) >= 2:
        steps = np.diff(obs, axis=0)
        norms = np.hypot(steps[:, 0], steps[:, 1])
        if norms[-1] >= min_step:
            heading = math.atan2(steps[-1, 1], steps[-1, 0])
        else:
            tail = norms[-recent:]
            k = int(np.argmax(tail))
            if tail[k] > 0:
                d = steps[-recent:][k]
                heading = math.atan2(d[1], d[0])
    return Pose2(float(last[0]), float(last[1]), heading)


# --------------------------------------------------------------------------
# polylines

def _points(lane_or_points) -> np.ndarray:
    if isinstance(lane_or_points, Lane):
        return lane_or_points.centerline
    return np.asarray(lane_or_points, dtype=np.float64)


def resample_centerline(lane_or_points, n_points: int = DEFAULT_LANE_POINTS) -> np.ndarray:
    """``n_points`` spaced uniformly by arc length; endpoints kept exactly."""
    if n_points < 2:
        raise GeometryError("n_points must be at least 2")
    pts = _points(lane_or_points)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0:
        raise GeometryError("cannot resample a zero-length centerline")
    keep = np.concatenate([[True], seg > 0])
    pts, cum = pts[keep], cum[keep]
    s = np.linspace(0.0, cum[-1], n_points)
    out = np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])
    out[0], out[-1] = pts[0], pts[-1]
    return out


def point_polyline_distance(points, polyline) -> np.ndarray:
    """Minimum Euclidean distance from each point to a polyline."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    line = np.asarray(polyline, dtype=np.float64)
    a, b = line[:-1], line[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("kij,ij->ki", ap, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d = np.hypot(p[:, None, 0] - closest[..., 0], p[:, None, 1] - closest[..., 1])
    return d.min(axis=1)


def find_candidate_lanes(graph: LaneGraph, position, radius: float = DEFAULT_RADIUS,
                         max_lanes: int = DEFAULT_MAX_LANES) -> list[Lane]:
    """Lanes within ``radius`` plus one hop of their successors, nearest first.

    Ties in distance are broken by lane id. The result may be empty.
    """
    if radius <= 0 or max_lanes < 1:
        raise ValueError("radius must be positive and max_lanes at least 1")
    pos = np.asarray(position, dtype=np.float64)
    dist: dict[str, float] = {}
    for lane in graph.lanes_near(pos, radius):
        d = float(point_polyline_distance(pos, lane.centerline)[0])
        if d <= radius:
            dist[lane.id] = d
    for lane_id in list(dist):
        for succ in graph.lanes[lane_id].successors:
            if succ not in dist:
                dist[succ] = float(point_polyline_distance(pos, graph.lanes[succ].centerline)[0])
    ranked = sorted(dist, key=lambda k: (dist[k], k))
    return [graph.lanes[k] for k in ranked[:max_lanes]]


def straight_pseudo_lane(pose: Pose2, behind: float = 10.0, ahead: float = 50.0) -> Lane:
    """Fallback lane along the agent heading for scenes with no mapped lane."""
    pts = pose.to_world(np.array([[-behind, 0.0], [ahead, 0.0]]))
    return Lane(id="__pseudo__", centerline=pts)


# --------------------------------------------------------------------------
# drivable area

def _on_segment(px, py, ax, ay, bx, by, tol=1e-9):
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    span = np.abs(bx - ax) + np.abs(by - ay)
    return ((np.abs(cross) <= tol * np.maximum(span, 1.0))
            & (px >= np.minimum(ax, bx) - tol) & (px <= np.maximum(ax, bx) + tol)
            & (py >= np.minimum(ay, by) - tol) & (py <= np.maximum(ay, by) + tol))


def points_in_polygon(points, polygon) -> np.ndarray:
    """Even-odd containment for many points; boundary counts as inside."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    poly = np.asarray(polygon, dtype=np.float64)
    a = poly
    b = np.roll(poly, -1, axis=0)
    px, py = p[:, 0:1], p[:, 1:2]
    ax, ay, bx, by = a[None, :, 0], a[None, :, 1], b[None, :, 0], b[None, :, 1]
    straddle = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
    crossings = (straddle & (px < xint)).sum(axis=1)
    boundary = _on_segment(px, py, ax, ay, bx, by).any(axis=1)
    return boundary | (crossings % 2 == 1)


def points_in_drivable_area(graph: LaneGraph, points) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inside = np.zeros(len(p), dtype=bool)
    if not graph.drivable_area:
        return inside
    boxes = graph.polygon_boxes()
    lo, hi = p.min(0), p.max(0)
    candidates = np.nonzero((boxes[:, 0] <= hi[0]) & (boxes[:, 2] >= lo[0])
                            & (boxes[:, 1] <= hi[1]) & (boxes[:, 3] >= lo[1]))[0]
    for i in candidates:
        todo = ~inside
        if not todo.any():
            break
        inside[todo] = points_in_polygon(p[todo], graph.drivable_area[i])
    return inside


def point_in_drivable_area(graph: LaneGraph, point) -> bool:
    return bool(points_in_drivable_area(graph, np.asarray(point, dtype=np.float64)[None])[0])


def is_simple_polygon(poly: np.ndarray) -> bool:
    """True if no two non-adjacent edges intersect."""
    p = np.asarray(poly, dtype=np.float64)
    n = len(p)
    if n < 3:
        return False
    a, b = p, np.roll(p, -1, axis=0)

    def orient(p0, p1, q):
        return np.sign((p1[..., 0] - p0[..., 0]) * (q[..., 1] - p0[..., 1])
                       - (p1[..., 1] - p0[..., 1]) * (q[..., 0] - p0[..., 0]))

    A, B = a[:, None], b[:, None]
    C, D = a[None, :], b[None, :]
    o1, o2 = orient(A, B, C), orient(A, B, D)
    o3, o4 = orient(C, D, A), orient(C, D, B)
    cross = (o1 * o2 < 0) & (o3 * o4 < 0)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    adjacent = (i == j) | ((i + 1) % n == j) | ((j + 1) % n == i)
    return not np.any(cross & ~adjacent)


# --------------------------------------------------------------------------
# labeling

def lane_ground_truth(lanes: Sequence, future) -> int:
    """Index of the lane closest (mean distance) to the last third of ``future``."""
    if len(lanes) == 0:
        raise LabelingError("no candidate lanes to label")
    fut = np.atleast_2d(np.asarray(future, dtype=np.float64))
    if len(fut) == 0:
        raise LabelingError("empty future trajectory")
    tail = fut[-math.ceil(len(fut) / 3):]
    scores = [float(point_polyline_distance(tail, _points(lane)).mean()) for lane in lanes]
    return int(np.argmin(scores))  # first minimum on ties


def closest_lane(lanes: Sequence, point) -> int:
    d = [float(point_polyline_distance(point, _points(lane))[0]) for lane in lanes]
    return int(np.argmin(d))


def heading_change(points, span: int = 10, min_dist: float = 0.5) -> float:
    """Net heading change in degrees between the start and end of a track.

    Start/end headings come from chords spanning ``span`` steps, which keeps
    position noise out of the estimate. Near-stationary chords count as no turn.
    """
    p = np.asarray(points, dtype=np.float64)
    k = min(span, len(p) - 1)
    d0, d1 = p[k] - p[0], p[-1] - p[-1 - k]
    if np.hypot(*d0) < min_dist or np.hypot(*d1) < min_dist:
        return 0.0
    return abs(math.degrees(wrap_angle(math.atan2(d1[1], d1[0]) - math.atan2(d0[1], d0[0]))))


def lateral_deviation(points) -> float:
    """Largest distance from the total-least-squares line through ``points``."""
    p = np.asarray(points, dtype=np.float64)
    centered = p - p.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    return float(np.abs(centered @ normal).max())


def is_non_straight(points, lanes: Sequence, obs_len: int,
                    heading_deg: float = NS_HEADING_DEG, lateral_m: float = NS_LATERAL_M) -> bool:
    """Heuristic NS flag over a full (observed + future) track."""
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 2:
        raise ValueError("need at least two points")
    if heading_change(p) > heading_deg or lateral_deviation(p) > lateral_m:
        return True
    if lanes and 0 < obs_len < len(p):
        return lane_ground_truth(lanes, p[obs_len:]) != closest_lane(lanes, p[obs_len - 1])
    return False


def transform_graph(graph: LaneGraph, rotation: float, translation: Iterable[float]) -> LaneGraph:
    """Apply one rigid motion to every lane and polygon."""
    pose = Pose2(*translation, rotation)
    lanes = {k: Lane(l.id, pose.to_world(l.centerline), l.successors, l.predecessors, l.is_intersection)
             for k, l in graph.lanes.items()}
    return LaneGraph(lanes, [pose.to_world(p) for p in graph.drivable_area])
