"""Synthetic driving scenes with known intentions.

Each scene instantiates one road template (straight multi-lane road, curved
road, four-way intersection, Y-fork) at its own spot of a shared world map,
randomly rotated. The target vehicle tracks its route with pure pursuit;
other vehicles ride their lane centerlines at constant speed. All positions
get Gaussian measurement noise.

The generator records the lane each target is heading for, so the
ground-truth labeling heuristic can be measured against real intent.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import mapgeom
from .dataset import Scene, SceneConfig, TrajectorySequence, align_others, build_scene, write_sequence_csv
from .errors import ConfigError
from .mapgeom import Lane, LaneGraph, Pose2

BEHAVIORS = ("keep", "lane-change-left", "lane-change-right", "turn-left", "turn-right", "fork-branch")
NS_BEHAVIORS = BEHAVIORS[1:]

PRESETS: dict[str, dict[str, int]] = {
    "tiny": {"keep": 44, "lane-change-left": 4, "lane-change-right": 4,
             "turn-left": 4, "turn-right": 4, "fork-branch": 4},
    "small": {"keep": 1440, "lane-change-left": 110, "lane-change-right": 110,
              "turn-left": 115, "turn-right": 115, "fork-branch": 110},
}

LANE_WIDTH = 3.5


@dataclass(frozen=True)
class GeneratorConfig:
    counts: Mapping[str, int] = field(default_factory=lambda: dict(PRESETS["tiny"]))
    obs_len: int = 20
    fut_len: int = 30
    hz: float = 10.0
    noise_std: float = 0.1
    speed_min: float = 3.0
    speed_max: float = 15.0
    max_others: int = 3
    spacing: float = 1000.0
    substeps: int = 4
    max_attempts: int = 50

    def __post_init__(self):
        counts = dict(self.counts)
        for name, n in counts.items():
            if name not in BEHAVIORS:
                raise ConfigError(f"unknown behavior {name!r}; expected one of {', '.join(BEHAVIORS)}")
            if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 0:
                raise ConfigError(f"count for {name!r} must be a non-negative integer, got {n!r}")
        if sum(counts.values()) == 0:
            raise ConfigError("behavior counts sum to zero")
        if not (0 < self.speed_min <= self.speed_max):
            raise ConfigError("need 0 < speed_min <= speed_max")
        object.__setattr__(self, "counts", {b: int(counts.get(b, 0)) for b in BEHAVIORS if counts.get(b, 0)})

    @classmethod
    def preset(cls, name: str, **overrides) -> GeneratorConfig:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        return cls(counts=dict(PRESETS[name]), **overrides)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def scene_config(self) -> SceneConfig:
        return SceneConfig(obs_len=self.obs_len, fut_len=self.fut_len, hz=self.hz)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = dict(self.counts)
        return d


# --------------------------------------------------------------------------
# polyline paths

class Route:
    """Arc-length parameterized polyline with linear extrapolation past the ends."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        seg = np.hypot(*np.diff(pts, axis=0).T)
        keep = np.concatenate([[True], seg > 1e-9])
        self.points = pts[keep]
        self.cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(self.points, axis=0).T))])
        self.length = float(self.cum[-1])

    def at(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        idx = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.cum) - 2)
        a, b = self.points[idx], self.points[idx + 1]
        seg = (self.cum[idx + 1] - self.cum[idx])[:, None]
        t = (s - self.cum[idx])[:, None] / seg
        return a + t * (b - a)

    def heading(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.cum) - 2))
        d = self.points[i + 1] - self.points[i]
        return math.atan2(d[1], d[0])

    def project(self, p) -> float:
        a, b = self.points[:-1], self.points[1:]
        ab = b - a
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
        closest = a + t[:, None] * ab
        d = np.hypot(*(closest - p).T)
        i = int(np.argmin(d))
        return float(self.cum[i] + t[i] * (self.cum[i + 1] - self.cum[i]))


def _concat(*polylines) -> np.ndarray:
    out = [np.asarray(polylines[0])]
    for pl in polylines[1:]:
        pl = np.asarray(pl)
        out.append(pl[1:] if np.allclose(pl[0], out[-1][-1]) else pl)
    return np.concatenate(out)


def _arc(center, radius, start, sweep, step=2.0) -> np.ndarray:
    """Points on a circle from angle ``start`` sweeping ``sweep`` radians."""
    n = max(2, int(math.ceil(abs(sweep) * radius / step)) + 1)
    ang = start + np.linspace(0.0, sweep, n)
    return np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])


def _line(a, b, step=10.0) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(2, int(math.ceil(np.hypot(*(b - a)) / step)) + 1)
    return a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)


def corridor(points, width=LANE_WIDTH) -> np.ndarray:
    """Polygon covering a lane: left edge forward, right edge backward."""
    p = np.asarray(points, dtype=np.float64)
    d = np.gradient(p, axis=0)
    d /= np.hypot(d[:, 0], d[:, 1])[:, None]
    normal = np.column_stack([-d[:, 1], d[:, 0]])
    half = width / 2
    return np.concatenate([p + half * normal, (p - half * normal)[::-1]])


def _box(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


# --------------------------------------------------------------------------
# templates (local frame; the target always approaches along +x)

@dataclass
class Template:
    lanes: dict[str, tuple[np.ndarray, tuple[str, ...], bool]]
    extra_polygons: list[np.ndarray] = field(default_factory=list)


def _road_template(rng, curved: bool) -> tuple[Template, int]:
    n_same = int(rng.integers(2, 4))
    length = 300.0
    if curved:
        radius = rng.uniform(300.0, 600.0)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        s = np.linspace(0.0, length, 61)
        theta = sign * s / radius
        ref = np.column_stack([radius * np.sin(s / radius), sign * radius * (1 - np.cos(s / radius))])
        normal = np.column_stack([-np.sin(theta), np.cos(theta)])
    else:
        s = np.linspace(0.0, length, 31)
        ref = np.column_stack([s, np.zeros_like(s)])
        normal = np.tile([0.0, 1.0], (len(s), 1))
    lanes = {f"L{j}": (ref + j * LANE_WIDTH * normal, (), False) for j in range(n_same)}
    lanes["OPP"] = ((ref - LANE_WIDTH * normal)[::-1], (), False)
    return Template(lanes), n_same


def _intersection_template(rng) -> tuple[Template, dict]:
    w = LANE_WIDTH
    r_right = rng.uniform(6.0, 10.0)
    r_left = r_right + w
    x_far = 2 * r_right + w
    y_top, y_bot = 1.5 * w + 2.0, -(0.5 * w + 2.0)
    approach = _line((-80.0, 0.0), (0.0, 0.0))
    left = _concat(_arc((0.0, r_left), r_left, -math.pi / 2, math.pi / 2),
                   _line((r_left, r_left), (r_left, r_left + 50.0)))
    right = _concat(_arc((0.0, -r_right), r_right, math.pi / 2, -math.pi / 2),
                    _line((r_right, -r_right), (r_right, -r_right - 50.0)))
    straight = _line((0.0, 0.0), (x_far + 50.0, 0.0))
    lanes = {
        "A": (approach, ("L", "S", "R"), False),
        "L": (left, (), True),
        "S": (straight, (), True),
        "R": (right, (), True),
        "O": (_line((0.0, w), (-80.0, w)), (), False),
        "NIN": (_line((r_right, y_top + 60.0), (r_right, y_top)), (), False),
        "SIN": (_line((r_left, y_bot - 60.0), (r_left, y_bot)), (), False),
        "EIN": (_line((x_far + 60.0, w), (x_far, w)), (), False),
    }
    geom = {"arc_left": r_left * math.pi / 2, "arc_right": r_right * math.pi / 2}
    return Template(lanes, [_box(0.0, y_bot, x_far, y_top)]), geom


def _fork_template(rng) -> tuple[Template, dict]:
    radius = rng.uniform(30.0, 60.0)
    alpha = math.radians(rng.uniform(25.0, 40.0))
    tail = 50.0
    end_l = np.array([radius * math.sin(alpha), radius * (1 - math.cos(alpha))])
    dir_l = np.array([math.cos(alpha), math.sin(alpha)])
    left = _concat(_arc((0.0, radius), radius, -math.pi / 2, alpha), _line(end_l, end_l + tail * dir_l, 5.0))
    right = left * np.array([1.0, -1.0])
    lanes = {
        "A": (_line((-80.0, 0.0), (0.0, 0.0)), ("BL", "BR"), False),
        "BL": (left, (), False),
        "BR": (right, (), False),
    }
    return Template(lanes), {"arc": radius * alpha}


# --------------------------------------------------------------------------
# motion

def pure_pursuit(paths, switch_times, s_start, speed, n_samples, hz, substeps) -> np.ndarray:
    """Track ``paths[k]`` from ``switch_times[k]`` on; returns sampled positions.

    Curvature command ``2 sin(alpha) / L`` with lookahead ``L`` scaled by speed.
    """
    dt = 1.0 / (hz * substeps)
    look = float(np.clip(0.6 * speed, 3.0, 10.0))
    pos = paths[0].at(s_start)[0]
    heading = paths[0].heading(s_start)
    out = np.empty((n_samples, 2))
    out[0] = pos
    k = 0
    for step in range(1, (n_samples - 1) * substeps + 1):
        t = (step - 1) * dt
        while k + 1 < len(paths) and t >= switch_times[k + 1]:
            k += 1
        path = paths[k]
        goal = path.at(path.project(pos[None]) + look)[0]
        alpha = math.atan2(goal[1] - pos[1], goal[0] - pos[0]) - heading
        kappa = float(np.clip(2.0 * math.sin(alpha) / look, -0.25, 0.25))
        mid = heading + 0.5 * speed * kappa * dt
        pos = pos + speed * dt * np.array([math.cos(mid), math.sin(mid)])
        heading += speed * kappa * dt
        if step % substeps == 0:
            out[step // substeps] = pos
    return out


def _ride(path: Route, s0: float, speed: float, times: np.ndarray) -> np.ndarray:
    return path.at(s0 + speed * times)


# --------------------------------------------------------------------------
# one scene

@dataclass
class RawScene:
    graph: LaneGraph
    tracks: list[tuple[str, str, np.ndarray, np.ndarray]]
    behavior: str
    intended_lane: str
    start_lane: str


def _draw_scene(rng, behavior: str, cfg: GeneratorConfig, prefix: str, pose: Pose2) -> RawScene:
    n = cfg.obs_len + cfg.fut_len
    times = np.arange(n) / cfg.hz
    t_obs = times[cfg.obs_len - 1]
    others: list[tuple[np.ndarray]] = []

    if behavior in ("keep", "lane-change-left", "lane-change-right"):
        tpl, n_same = _road_template(rng, curved=rng.random() < 0.5)
        if behavior == "keep":
            j = int(rng.integers(0, n_same))
            goal = j
        elif behavior == "lane-change-left":
            j = int(rng.integers(0, n_same - 1))
            goal = j + 1
        else:
            j = int(rng.integers(1, n_same))
            goal = j - 1
        v = rng.uniform(max(cfg.speed_min, 5.0 if goal != j else cfg.speed_min), cfg.speed_max)
        start, target = f"L{j}", f"L{goal}"
        paths = [Route(tpl.lanes[start][0])]
        switches = [0.0]
        if goal != j:
            paths.append(Route(tpl.lanes[target][0]))
            switches.append(t_obs - rng.uniform(0.2, 0.8))
        s_obs = 150.0 + rng.uniform(-30.0, 30.0)
        s0 = s_obs - v * t_obs
        xy = pure_pursuit(paths, switches, s0, v, n, cfg.hz, cfg.substeps)
        candidates = [
            (Route(tpl.lanes[start][0]), s0 + rng.uniform(15.0, 40.0), max(2.0, v + rng.uniform(-1.0, 1.0))),
            (Route(tpl.lanes["OPP"][0]), rng.uniform(80.0, 220.0), rng.uniform(5.0, 15.0)),
        ]
        spare = [f"L{k}" for k in range(n_same) if k not in (j, goal)]
        if spare:
            candidates.append((Route(tpl.lanes[spare[0]][0]), s0 + rng.uniform(-30.0, 30.0),
                               max(2.0, v + rng.uniform(-2.0, 2.0))))
    elif behavior in ("turn-left", "turn-right"):
        tpl, geom = _intersection_template(rng)
        branch = "L" if behavior == "turn-left" else "R"
        arc_len = geom["arc_left"] if branch == "L" else geom["arc_right"]
        v = rng.uniform(max(cfg.speed_min, 4.0), min(cfg.speed_max, 9.0))
        start, target = "A", branch
        route = Route(_concat(tpl.lanes["A"][0], tpl.lanes[branch][0]))
        s_obs = 80.0 + rng.uniform(0.25, 0.5) * arc_len
        s0 = s_obs - v * t_obs
        xy = pure_pursuit([route], [0.0], s0, v, n, cfg.hz, cfg.substeps)
        cross = "NIN" if rng.random() < 0.5 else "SIN"
        candidates = [
            (Route(tpl.lanes["O"][0]), rng.uniform(0.0, 20.0), rng.uniform(4.0, 10.0)),
            (Route(tpl.lanes[cross][0]), rng.uniform(30.0, 55.0), rng.uniform(0.0, 2.0)),
            (Route(_concat(tpl.lanes["A"][0], tpl.lanes["S"][0])), s0 - rng.uniform(12.0, 25.0),
             rng.uniform(4.0, 9.0)),
        ]
    elif behavior == "fork-branch":
        tpl, geom = _fork_template(rng)
        branch = "BL" if rng.random() < 0.5 else "BR"
        other_branch = "BR" if branch == "BL" else "BL"
        v = rng.uniform(max(cfg.speed_min, 5.0), min(cfg.speed_max, 13.0))
        start, target = "A", branch
        route = Route(_concat(tpl.lanes["A"][0], tpl.lanes[branch][0]))
        s_obs = 80.0 + rng.uniform(8.0, 20.0)
        s0 = s_obs - v * t_obs
        xy = pure_pursuit([route], [0.0], s0, v, n, cfg.hz, cfg.substeps)
        candidates = [
            (Route(_concat(tpl.lanes["A"][0], tpl.lanes[other_branch][0])), s0 + rng.uniform(20.0, 40.0),
             rng.uniform(5.0, 13.0)),
            (route, s0 - rng.uniform(12.0, 25.0), max(2.0, v + rng.uniform(-1.0, 1.0))),
        ]
    else:
        raise ConfigError(f"unknown behavior {behavior!r}")

    n_others = int(rng.integers(0, min(cfg.max_others, len(candidates)) + 1))
    picks = rng.permutation(len(candidates))[:n_others]
    for i in sorted(picks):
        path, s_start, speed = candidates[i]
        others.append(_ride(path, s_start, speed, times))

    noise = lambda shape: rng.normal(0.0, cfg.noise_std, shape)  # noqa: E731
    tracks = [(f"{prefix}-agent", "AGENT", times, pose.to_world(xy + noise(xy.shape)))]
    for k, o in enumerate(others):
        tracks.append((f"{prefix}-v{k}", "AV" if k == 0 else "OTHERS", times, pose.to_world(o + noise(o.shape))))

    lanes = {}
    polygons = []
    for name, (pts, succ, inter) in tpl.lanes.items():
        lid = f"{prefix}-{name}"
        preds = tuple(f"{prefix}-{p}" for p, (_, s, _) in tpl.lanes.items() if name in s)
        lanes[lid] = Lane(lid, pose.to_world(pts), tuple(f"{prefix}-{x}" for x in succ), preds, inter)
        polygons.append(pose.to_world(corridor(pts)))
    polygons.extend(pose.to_world(p) for p in tpl.extra_polygons)
    return RawScene(LaneGraph(lanes, polygons), tracks, behavior,
                    f"{prefix}-{target}", f"{prefix}-{start}")


def _consistent(scene: Scene, raw: RawScene) -> bool:
    """Behavior-defining checks; failing draws are redrawn."""
    if scene.intended_lane is None:
        return False
    if raw.behavior == "keep":
        return not scene.ns_flag
    if raw.behavior in ("turn-left", "turn-right"):
        return scene.ns_flag
    if raw.behavior.startswith("lane-change"):
        if raw.start_lane not in scene.lane_ids:
            return False
        last_obs = scene.target.positions[len(scene.obs_pos) - 1]
        closest = mapgeom.closest_lane([scene.frame.to_world(l) for l in scene.lanes], last_obs)
        return scene.lane_ids[closest] == raw.start_lane and scene.ns_flag
    return True


# --------------------------------------------------------------------------
# dataset

@dataclass
class SyntheticDataset:
    config: GeneratorConfig
    seed: int
    graph: LaneGraph
    scenes: list[Scene]
    tracks: dict[str, list[tuple[str, str, np.ndarray, np.ndarray]]]
    meta: dict[str, dict]

    def manifest(self) -> dict:
        counts = {b: 0 for b in self.config.counts}
        for m in self.meta.values():
            counts[m["behavior"]] += 1
        ns = sum(s.ns_flag for s in self.scenes)
        return {
            "format": 1,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "num_scenes": len(self.scenes),
            "counts": counts,
            "ns_count": int(ns),
            "ns_fraction": ns / len(self.scenes),
            "scenes": self.meta,
        }

    def write(self, out_dir) -> Path:
        """Write ``map.json``, ``sequences/*.csv`` and ``manifest.json``."""
        out = Path(out_dir)
        (out / "sequences").mkdir(parents=True, exist_ok=True)
        self.graph.save(out / "map.json")
        for sid, tracks in self.tracks.items():
            write_sequence_csv(out / "sequences" / f"{sid}.csv", tracks)
        text = json.dumps(self.manifest(), indent=1, sort_keys=True)
        (out / "manifest.json").write_text(text + "\n")
        return out


def manifest_hash(out_dir) -> str:
    return hashlib.sha256((Path(out_dir) / "manifest.json").read_bytes()).hexdigest()


def generate_synthetic(config: GeneratorConfig, seed: int) -> SyntheticDataset:
    """Deterministic in ``(config, seed)``."""
    behaviors = [b for b in BEHAVIORS for _ in range(config.counts.get(b, 0))]
    order = np.random.default_rng(np.random.SeedSequence([seed, 0])).permutation(len(behaviors))
    behaviors = [behaviors[i] for i in order]
    cols = int(math.ceil(math.sqrt(len(behaviors))))
    scene_cfg = config.scene_config()

    lanes: dict[str, Lane] = {}
    polygons: list[np.ndarray] = []
    scenes, tracks, meta = [], {}, {}
    for i, behavior in enumerate(behaviors):
        sid = f"{i:05d}"
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        for _ in range(config.max_attempts):
            center = np.array([(i % cols) * config.spacing, (i // cols) * config.spacing])
            pose = Pose2(*(center + rng.uniform(-100.0, 100.0, 2)), rng.uniform(-math.pi, math.pi))
            raw = _draw_scene(rng, behavior, config, sid, pose)
            target = TrajectorySequence.from_positions(raw.tracks[0][0], raw.tracks[0][2], raw.tracks[0][3],
                                                       "target")
            other_seqs = [TrajectorySequence.from_positions(t, ts, xy) for t, _, ts, xy in raw.tracks[1:]]
            scene = build_scene(sid, target, align_others(target, other_seqs, scene_cfg), raw.graph, scene_cfg,
                                intended_lane_id=raw.intended_lane, behavior=behavior)
            if _consistent(scene, raw):
                break
        else:
            raise RuntimeError(f"scene {sid}: no consistent {behavior} draw in {config.max_attempts} attempts")
        lanes.update(raw.graph.lanes)
        polygons.extend(raw.graph.drivable_area)
        scenes.append(scene)
        tracks[sid] = raw.tracks
        meta[sid] = {"behavior": behavior, "intended_lane": raw.intended_lane}
    return SyntheticDataset(config, seed, LaneGraph(lanes, polygons), scenes, tracks, meta)
