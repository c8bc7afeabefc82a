"""Displacement metrics, drivable-area compliance, miss rate and evaluation reports.

Every metric works on city-frame trajectories. Top-K selection ranks
hypotheses by probability, ties going to the lower index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import network as nw
from .dataset import Scene, central_velocities, collate
from .errors import DimensionError, UsageError
from .mapgeom import LaneGraph, points_in_drivable_area
from .network import GaussianTrajectory

MISS_THRESHOLD = 2.0
DEFAULT_KS = (1, 3, 6)
CV_RECENT = 5
CV_SIGMA = 1.0


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} must both be [T, 2]")
    if len(pred) < 1:
        raise DimensionError("trajectories must have at least one step")
    return pred, gt


def ade(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)))


def fde(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def top_k(preds: Sequence[GaussianTrajectory], k: int) -> list[GaussianTrajectory]:
    if k < 1:
        raise UsageError("K must be at least 1")
    probs = np.array([p.probability for p in preds])
    order = np.lexsort((np.arange(len(preds)), -probs))
    return [preds[i] for i in order[:k]]


def min_k(preds: Sequence[GaussianTrajectory], gt, k: int) -> tuple[float, float]:
    """(minADE, minFDE) over the top-K; minADE belongs to the minFDE trajectory."""
    if not preds:
        raise UsageError("no predictions")
    chosen = top_k(preds, k)
    fdes = [fde(p.mu, gt) for p in chosen]
    best = int(np.argmin(fdes))
    return ade(chosen[best].mu, gt), fdes[best]


def trajectory_in_area(graph: LaneGraph, points) -> bool:
    return bool(np.all(points_in_drivable_area(graph, points)))


def dac(trajectories, graph: LaneGraph) -> float:
    """Fraction of trajectories whose every point lies in the drivable area."""
    trajs = [t.mu if isinstance(t, GaussianTrajectory) else np.asarray(t) for t in trajectories]
    if not trajs:
        return float("nan")
    return float(np.mean([trajectory_in_area(graph, t) for t in trajs]))


def miss_rate_from_fde(min_fdes, threshold: float = MISS_THRESHOLD) -> float:
    v = np.asarray(min_fdes, dtype=np.float64)
    if v.size == 0:
        return float("nan")
    return float(np.mean(v > threshold))


def miss_rate(preds: Sequence[Sequence[GaussianTrajectory]], gts, k: int,
              threshold: float = MISS_THRESHOLD) -> float:
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} prediction sets for {len(gts)} ground truths")
    return miss_rate_from_fde([min_k(p, g, k)[1] for p, g in zip(preds, gts)], threshold)


# --------------------------------------------------------------------------
# constant-velocity reference

def constant_velocity_extrapolate(observed, dt: float, horizon: int) -> np.ndarray:
    """Continue from the last point at the mean of the last five central-difference velocities."""
    obs = np.asarray(observed, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != 2 or len(obs) < 2:
        raise UsageError("constant-velocity prediction needs at least 2 observed points")
    vel = central_velocities(obs, np.arange(len(obs)) * dt)
    v = vel[-CV_RECENT:].mean(axis=0)
    steps = np.arange(1, horizon + 1)[:, None] * dt
    return obs[-1] + steps * v


def constant_velocity_predict(scene: Scene, horizon: int | None = None) -> GaussianTrajectory:
    horizon = len(scene.future) if horizon is None else horizon
    times = scene.target.timestamps[: len(scene.obs_pos)]
    dt = (times[-1] - times[0]) / (len(times) - 1) if len(times) > 1 else 0.1
    mu = constant_velocity_extrapolate(scene.obs_world, dt, horizon)
    return GaussianTrajectory(mu, np.full((horizon, 2), CV_SIGMA), np.zeros(horizon), 1.0, None)


# --------------------------------------------------------------------------
# predictors

Predictor = Callable[[Sequence[Scene], int], list]


class ModelPredictor:
    """Wraps trained parameters as ``predictor(scenes, k) -> hypotheses per scene``."""

    def __init__(self, params: Mapping[str, np.ndarray], config: nw.ModelConfig, seed: int = 0, chunk: int = 128):
        nw.check_params(params, config)
        self.params, self.config, self.seed, self.chunk = params, config, seed, chunk
        self.name = "model"

    def __call__(self, scenes: Sequence[Scene], k: int) -> list[list[GaussianTrajectory]]:
        out = []
        for i in range(0, len(scenes), self.chunk):
            out.extend(nw.predict_batch(scenes[i:i + self.chunk], self.params, self.config, k, self.seed))
        return out


class ConstantVelocityPredictor:
    name = "cv"

    def __call__(self, scenes: Sequence[Scene], k: int) -> list[list[GaussianTrajectory]]:
        if k < 1:
            raise UsageError("K must be at least 1")
        return [[constant_velocity_predict(s)] for s in scenes]


class OraclePredictor:
    """Returns the ground truth; useful for checking the evaluation plumbing."""

    name = "oracle"

    def __call__(self, scenes: Sequence[Scene], k: int) -> list[list[GaussianTrajectory]]:
        out = []
        for s in scenes:
            t = len(s.future)
            out.append([GaussianTrajectory(s.future_world, np.ones((t, 2)), np.zeros(t), 1.0, None)])
        return out


# --------------------------------------------------------------------------
# reports

@dataclass
class KBlock:
    ade: float | None
    fde: float | None
    dac: float | None
    mr: float | None

    def as_dict(self) -> dict:
        return {"ADE": self.ade, "FDE": self.fde, "DAC": self.dac, "MR": self.mr}


@dataclass
class EvalReport:
    predictor: str
    ks: tuple[int, ...]
    counts: dict[str, int]
    blocks: dict[str, dict[int, KBlock]]
    seed: int = 0
    # per-scene minFDE, aligned with the evaluated scene order; kept out of the document
    min_fde: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    ns_mask: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "predictor": self.predictor,
            "seed": self.seed,
            "K": list(self.ks),
            "counts": dict(self.counts),
            "subsets": {name: {f"K={k}": blk.as_dict() for k, blk in by_k.items()}
                        for name, by_k in self.blocks.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        def cell(v):
            return "-" if v is None else f"{v:.4f}"

        rows = [("subset", "n", "K", "minADE", "minFDE", "DAC", "MR")]
        for name, by_k in self.blocks.items():
            for k, blk in by_k.items():
                rows.append((name, str(self.counts[name]), str(k), cell(blk.ade), cell(blk.fde),
                             cell(blk.dac), cell(blk.mr)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [f"predictor: {self.predictor}"]
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"


def _block(min_ade: np.ndarray, min_fde: np.ndarray, in_area: list[list[bool]]) -> KBlock:
    if len(min_ade) == 0:
        return KBlock(None, None, None, None)
    flat = [x for per_scene in in_area for x in per_scene]
    return KBlock(float(np.mean(min_ade)), float(np.mean(min_fde)), float(np.mean(flat)),
                  miss_rate_from_fde(min_fde))


def evaluate(predictor: Predictor, scenes: Sequence[Scene], graph: LaneGraph | None = None,
             ks: Sequence[int] = DEFAULT_KS, seed: int = 0, subsets: Sequence[str] = ("full", "ns")) -> EvalReport:
    """Aggregate metrics over all scenes and over the non-straight ones.

    The predictor is queried once per K. DAC is left empty when no map is given.
    """
    if not scenes:
        raise UsageError("no scenes to evaluate")
    scenes = list(scenes)
    ks = tuple(int(k) for k in ks)
    if any(k < 1 for k in ks):
        raise UsageError("every K must be at least 1")
    ns = np.array([s.ns_flag for s in scenes], dtype=bool)
    masks = {"full": np.ones(len(scenes), dtype=bool), "ns": ns}
    blocks: dict[str, dict[int, KBlock]] = {name: {} for name in subsets}
    per_scene_fde = {}
    for k in ks:
        preds = predictor(scenes, k)
        chosen = [top_k(p, k) for p in preds]
        pairs = np.array([min_k(c, s.future_world, k) for c, s in zip(chosen, scenes)])
        areas = [[trajectory_in_area(graph, h.mu) for h in c] if graph is not None else [] for c in chosen]
        per_scene_fde[k] = pairs[:, 1]
        for name in subsets:
            m = masks[name]
            blk = _block(pairs[m, 0], pairs[m, 1], [a for a, keep in zip(areas, m) if keep])
            if graph is None:
                blk.dac = None
            blocks[name][k] = blk
    counts = {name: int(masks[name].sum()) for name in subsets}
    return EvalReport(getattr(predictor, "name", "predictor"), ks, counts, blocks, seed, per_scene_fde, ns)


def lane_accuracy(scenes: Sequence[Scene], params: Mapping[str, np.ndarray], config: nw.ModelConfig,
                  label: str = "gt", chunk: int = 256) -> float:
    """Top-1 lane-attention accuracy against ``gt_lane`` or the generator's ``intended_lane``."""
    if label not in ("gt", "intended"):
        raise UsageError("label must be 'gt' or 'intended'")
    if not config.use_lanes:
        raise UsageError("model has no lane attention")
    hits, total = 0, 0
    p = nw.as_tensors(params)
    for i in range(0, len(scenes), chunk):
        part = [s for s in scenes[i:i + chunk] if label == "gt" or s.intended_lane is not None]
        if not part:
            continue
        batch = collate(part)
        probs = np.where(batch.lane_mask, nw.encode_batch(batch, p, config).lane_probs.data, -1.0)
        want = np.array([s.gt_lane if label == "gt" else s.intended_lane for s in part])
        hits += int(np.sum(np.argmax(probs, axis=1) == want))
        total += len(part)
    if total == 0:
        raise UsageError("no labelled scenes")
    return hits / total
