"""Trajectory ingestion, scene assembly and batching.

A sequence file is a CSV with header ``timestamp,track_id,object_type,x,y``;
exactly one track is the ``AGENT``. Scenes are assembled against a
:class:`~laneattn.mapgeom.LaneGraph` and stored in the agent-centric frame.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import mapgeom
from .errors import DataError
from .mapgeom import Lane, LaneGraph, Pose2

log = logging.getLogger(__name__)

CSV_HEADER = ("timestamp", "track_id", "object_type", "x", "y")
OBJECT_TYPES = ("AGENT", "AV", "OTHERS")


@dataclass(frozen=True)
class SceneConfig:
    obs_len: int = 20
    fut_len: int = 30
    hz: float = 10.0
    radius: float = mapgeom.DEFAULT_RADIUS
    max_lanes: int = mapgeom.DEFAULT_MAX_LANES
    lane_points: int = mapgeom.DEFAULT_LANE_POINTS
    other_radius: float = 50.0
    max_others: int = 8
    promote_all_tracks: bool = False

    @property
    def seq_len(self) -> int:
        return self.obs_len + self.fut_len


@dataclass
class TrajectorySequence:
    track_id: str
    timestamps: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    role: str = "other"

    @classmethod
    def from_positions(cls, track_id, timestamps, positions, role="other") -> TrajectorySequence:
        t = np.asarray(timestamps, dtype=np.float64)
        p = np.asarray(positions, dtype=np.float64)
        return cls(track_id, t, p, central_velocities(p, t), role)


@dataclass
class Scene:
    scene_id: str
    frame: Pose2
    obs_pos: np.ndarray      # [obs, 2] agent frame
    obs_vel: np.ndarray      # [obs, 2]
    future: np.ndarray       # [fut, 2] agent frame
    others_pos: np.ndarray   # [O, obs, 2]
    others_vel: np.ndarray   # [O, obs, 2]
    lanes: np.ndarray        # [L, lane_points, 2] agent frame
    lane_ids: tuple[str, ...]
    gt_lane: int
    ns_flag: bool
    target: TrajectorySequence
    others: list[TrajectorySequence] = field(default_factory=list)
    intended_lane: int | None = None
    behavior: str | None = None

    @property
    def num_lanes(self) -> int:
        return len(self.lanes)

    @property
    def future_world(self) -> np.ndarray:
        return self.frame.to_world(self.future)

    @property
    def obs_world(self) -> np.ndarray:
        return self.frame.to_world(self.obs_pos)


def central_velocities(positions, timestamps) -> np.ndarray:
    """Central differences inside, one-sided at the ends, uniform spacing assumed."""
    p = np.asarray(positions, dtype=np.float64)
    if len(p) < 2:
        return np.zeros_like(p)
    t = np.asarray(timestamps, dtype=np.float64)
    dt = (t[-1] - t[0]) / (len(t) - 1)
    if not dt > 0:
        raise DataError("timestamps must be strictly increasing")
    return np.gradient(p, dt, axis=0)


# --------------------------------------------------------------------------
# scene assembly

def build_scene(scene_id: str, target: TrajectorySequence, others: Sequence[TrajectorySequence],
                graph: LaneGraph, config: SceneConfig = SceneConfig(),
                intended_lane_id: str | None = None, behavior: str | None = None) -> Scene:
    """Assemble one normalized scene from city-frame tracks.

    ``others`` must already be aligned to the target's observed timestamps.
    Velocities fed to the model use the observed window only, so the last
    observed velocity never peeks at the future.
    """
    n_obs = config.obs_len
    if len(target.positions) < config.seq_len:
        raise DataError(f"{scene_id}: target has {len(target.positions)} steps, need {config.seq_len}")
    pos = target.positions[: config.seq_len]
    times = target.timestamps[: config.seq_len]
    obs, fut = pos[:n_obs], pos[n_obs:]
    frame = mapgeom.agent_pose(obs)

    lanes = mapgeom.find_candidate_lanes(graph, obs[-1], config.radius, config.max_lanes)
    if not lanes:
        lanes = [mapgeom.straight_pseudo_lane(frame)]
    gt = mapgeom.lane_ground_truth(lanes, fut)
    ns = mapgeom.is_non_straight(pos, lanes, n_obs)

    lane_pts = np.stack([frame.to_local(mapgeom.resample_centerline(l, config.lane_points)) for l in lanes])
    obs_vel = central_velocities(obs, times[:n_obs])

    others = list(others)
    o_pos = np.zeros((len(others), n_obs, 2))
    o_vel = np.zeros((len(others), n_obs, 2))
    for k, tr in enumerate(others):
        o_pos[k] = frame.to_local(tr.positions[:n_obs])
        o_vel[k] = frame.vectors_to_local(central_velocities(tr.positions[:n_obs], times[:n_obs]))

    lane_ids = tuple(l.id for l in lanes)
    intended = lane_ids.index(intended_lane_id) if intended_lane_id in lane_ids else None
    return Scene(
        scene_id=scene_id,
        frame=frame,
        obs_pos=frame.to_local(obs),
        obs_vel=frame.vectors_to_local(obs_vel),
        future=frame.to_local(fut),
        others_pos=o_pos,
        others_vel=o_vel,
        lanes=lane_pts,
        lane_ids=lane_ids,
        gt_lane=gt,
        ns_flag=bool(ns),
        target=TrajectorySequence(target.track_id, times, pos, central_velocities(pos, times), "target"),
        others=others,
        intended_lane=intended,
        behavior=behavior,
    )


def align_others(target: TrajectorySequence, tracks: Iterable[TrajectorySequence],
                 config: SceneConfig) -> list[TrajectorySequence]:
    """Observed-window copies of nearby tracks on the target's time grid.

    A track must be present at the last observed timestamp; earlier gaps are
    back-filled from its first observed sample. Keeps the nearest
    ``max_others`` within ``other_radius``.
    """
    n_obs = config.obs_len
    grid = np.round(target.timestamps[:n_obs] * 1000).astype(np.int64)
    anchor = target.positions[n_obs - 1]
    picked = []
    for tr in tracks:
        keys = np.round(tr.timestamps * 1000).astype(np.int64)
        lookup = {int(k): i for i, k in enumerate(keys)}
        if int(grid[-1]) not in lookup:
            continue
        rows = [lookup.get(int(k)) for k in grid]
        first = next(i for i, r in enumerate(rows) if r is not None)
        pos = np.empty((n_obs, 2))
        for i, r in enumerate(rows):
            if r is None:
                pos[i] = tr.positions[rows[first]] if i < first else pos[i - 1]
            else:
                pos[i] = tr.positions[r]
        dist = float(np.hypot(*(pos[-1] - anchor)))
        if dist <= config.other_radius:
            picked.append((dist, tr.track_id, TrajectorySequence.from_positions(
                tr.track_id, target.timestamps[:n_obs], pos, "other")))
    picked.sort(key=lambda item: (item[0], item[1]))
    return [p[2] for p in picked[: config.max_others]]


# --------------------------------------------------------------------------
# CSV ingestion

def read_sequence_csv(path) -> dict[str, tuple[str, np.ndarray, np.ndarray]]:
    """Parse one sequence file into ``track_id -> (object_type, times, xy)``."""
    path = Path(path)
    rows: dict[str, list] = {}
    types: dict[str, str] = {}
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
                raise DataError(f"{path}: header must be {','.join(CSV_HEADER)}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 5:
                    raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                ts, tid, otype, x, y = row
                if otype not in OBJECT_TYPES:
                    raise DataError(f"{path}:{lineno}: unknown object_type {otype!r}")
                try:
                    rec = (float(ts), float(x), float(y))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric timestamp or coordinate") from None
                if not all(math.isfinite(v) for v in rec):
                    raise DataError(f"{path}:{lineno}: non-finite value")
                rows.setdefault(tid, []).append(rec)
                types[tid] = otype
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out = {}
    for tid, recs in rows.items():
        arr = np.array(sorted(recs), dtype=np.float64)
        out[tid] = (types[tid], arr[:, 0], arr[:, 1:3])
    return out


def write_sequence_csv(path, tracks: Sequence[tuple[str, str, np.ndarray, np.ndarray]]) -> None:
    """Write ``(track_id, object_type, times, xy)`` tracks; floats round-trip exactly."""
    lines = [",".join(CSV_HEADER)]
    records = []
    for tid, otype, times, xy in tracks:
        for t, (x, y) in zip(times, xy):
            records.append((float(t), tid, otype, float(x), float(y)))
    records.sort(key=lambda r: (r[0], r[1]))
    lines.extend(f"{t!r},{tid},{otype},{x!r},{y!r}" for t, tid, otype, x, y in records)
    Path(path).write_text("\n".join(lines) + "\n")


def scenes_from_sequence(seq_id: str, parsed, graph: LaneGraph, config: SceneConfig,
                         meta: dict | None = None) -> list[Scene]:
    agents = [tid for tid, (otype, _, _) in parsed.items() if otype == "AGENT"]
    if len(agents) != 1:
        log.warning("%s: expected exactly one AGENT track, found %d; skipped", seq_id, len(agents))
        return []
    agent_id = agents[0]
    tracks = {tid: TrajectorySequence.from_positions(tid, t, xy, "target" if tid == agent_id else "other")
              for tid, (_, t, xy) in parsed.items()}
    targets = [agent_id]
    if config.promote_all_tracks:
        targets += sorted(tid for tid, tr in tracks.items()
                          if tid != agent_id and len(tr.timestamps) >= config.seq_len)
    meta = meta or {}
    scenes = []
    for tid in targets:
        tgt = tracks[tid]
        if len(tgt.positions) < config.seq_len:
            log.warning("%s: track %s has %d steps, need %d; skipped", seq_id, tid, len(tgt.positions),
                        config.seq_len)
            continue
        others = align_others(tgt, (tracks[k] for k in sorted(tracks) if k != tid), config)
        sid = seq_id if tid == agent_id else f"{seq_id}:{tid}"
        scenes.append(build_scene(sid, tgt, others, graph, config,
                                  intended_lane_id=meta.get("intended_lane") if tid == agent_id else None,
                                  behavior=meta.get("behavior") if tid == agent_id else None))
    return scenes


def load_dataset(traj_dir, map_path, config: SceneConfig = SceneConfig()) -> list[Scene]:
    """One scene per sequence file (more with ``promote_all_tracks``).

    If ``manifest.json`` sits next to the sequence directory or inside it, the
    generator's recorded behavior and intended lane are attached.
    """
    traj_dir = Path(traj_dir)
    graph = LaneGraph.load(map_path)
    meta = {}
    for cand in (traj_dir / "manifest.json", traj_dir.parent / "manifest.json"):
        if cand.exists():
            meta = json.loads(cand.read_text()).get("scenes", {})
            break
    scenes = []
    for path in sorted(traj_dir.glob("*.csv")):
        seq_id = path.stem
        scenes.extend(scenes_from_sequence(seq_id, read_sequence_csv(path), graph, config, meta.get(seq_id)))
    return scenes


# --------------------------------------------------------------------------
# splitting and batching

def split(scenes: Sequence[Scene], ratios=(0.8, 0.2), seed: int = 0) -> tuple[list[Scene], list[Scene]]:
    r = np.asarray(ratios, dtype=np.float64)
    if len(r) != 2 or np.any(r <= 0) or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be two positive numbers summing to 1")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(round(r[0] * len(scenes)))
    return [scenes[i] for i in order[:n_train]], [scenes[i] for i in order[n_train:]]


@dataclass
class SceneBatch:
    scenes: list[Scene]
    obs_pos: np.ndarray       # [B, obs, 2]
    obs_vel: np.ndarray       # [B, obs, 2]
    future: np.ndarray        # [B, fut, 2]
    others_pos: np.ndarray    # [B, O, obs, 2]
    others_vel: np.ndarray    # [B, O, obs, 2]
    others_mask: np.ndarray   # [B, O] bool
    lanes: np.ndarray         # [B, L, P, 2]
    lane_mask: np.ndarray     # [B, L] bool
    gt_lane: np.ndarray       # [B] int

    def __len__(self) -> int:
        return len(self.scenes)


def collate(scenes: Sequence[Scene]) -> SceneBatch:
    scenes = list(scenes)
    b = len(scenes)
    n_obs = scenes[0].obs_pos.shape[0]
    n_pts = scenes[0].lanes.shape[1]
    max_o = max(1, max(len(s.others_pos) for s in scenes))
    max_l = max(s.num_lanes for s in scenes)
    others_pos = np.zeros((b, max_o, n_obs, 2))
    others_vel = np.zeros((b, max_o, n_obs, 2))
    others_mask = np.zeros((b, max_o), dtype=bool)
    lanes = np.zeros((b, max_l, n_pts, 2))
    lane_mask = np.zeros((b, max_l), dtype=bool)
    for i, s in enumerate(scenes):
        o = len(s.others_pos)
        others_pos[i, :o] = s.others_pos
        others_vel[i, :o] = s.others_vel
        others_mask[i, :o] = True
        lanes[i, : s.num_lanes] = s.lanes
        lane_mask[i, : s.num_lanes] = True
    return SceneBatch(
        scenes=scenes,
        obs_pos=np.stack([s.obs_pos for s in scenes]),
        obs_vel=np.stack([s.obs_vel for s in scenes]),
        future=np.stack([s.future for s in scenes]),
        others_pos=others_pos,
        others_vel=others_vel,
        others_mask=others_mask,
        lanes=lanes,
        lane_mask=lane_mask,
        gt_lane=np.array([s.gt_lane for s in scenes], dtype=np.int64),
    )


def make_batches(scenes: Sequence[Scene], batch_size: int, seed: int, epoch: int = 0,
                 shuffle: bool = True) -> list[SceneBatch]:
    """Shuffle with ``seed + epoch`` and cut into batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.random.default_rng(seed + epoch).permutation(len(scenes)) if shuffle else np.arange(len(scenes))
    return [collate([scenes[i] for i in order[k:k + batch_size]]) for k in range(0, len(scenes), batch_size)]
