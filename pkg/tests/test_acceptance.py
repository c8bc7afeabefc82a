"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION n ... PASS|FAIL`` line straight to the
terminal so the outcome shows up in a plain ``pytest -v`` log. The trained
models are built once per session on the "small" synthetic preset with the
"desk" schedule, which takes roughly twenty minutes on one core.
"""

import json
import math
import time

import numpy as np
import pytest

from helpers import brute_ade, brute_fde, central_difference, max_rel_error, ray_cast_inside
from test_diffcore import PRIMITIVES, _grad_check
from laneattn import cli
from laneattn import diffcore as dc
from laneattn import metrics as mt
from laneattn import network as nw
from laneattn import training as tr
from laneattn.dataset import SceneConfig, collate, scenes_from_sequence, split
from laneattn.mapgeom import LaneGraph, Pose2, transform_graph
from laneattn.network import GaussianTrajectory

# tolerances and thresholds, pinned
FD_EPS = 1e-5
PRIMITIVE_RTOL = 1e-4
GRAPH_RTOL = 1e-3
GRADIENT_BUDGET_S = 60.0
SUM_TOL = 1e-9
ANALYTIC_TOL = 1e-9
ORACLE_TOL = 1e-12
GEOMETRY_TOL = 1e-9
OVERFIT_REDUCTION = 0.90
OVERFIT_BUDGET_S = 300.0
INTENT_ACCURACY = 0.90
INTENT_BUDGET_S = 900.0
FORK_DIVERGENCE_M = 2.0
EQUIVARIANCE_TOL = 1e-6


@pytest.fixture
def verdict(capsys):
    def emit(number, title, passed, detail=""):
        with capsys.disabled():
            print(f"\nCRITERION {number:>2} {title}: {'PASS' if passed else 'FAIL'}  {detail}", flush=True)
        return passed
    return emit


# --------------------------------------------------------------------------
# shared trained models

@pytest.fixture(scope="session")
def small_split(small_dataset):
    trn, val = split(small_dataset.scenes, (0.8, 0.2), 0)
    return trn, val


class Trained:
    def __init__(self, config, result, seconds):
        self.config, self.result, self.seconds = config, result, seconds

    @property
    def params(self):
        return self.result.best_params


@pytest.fixture(scope="session")
def trained_models(small_split):
    cache = {}
    variants = {
        "full": nw.ModelConfig(),
        "lstm": nw.ModelConfig(use_lanes=False, use_interaction=False),
        "lstm_lane": nw.ModelConfig(use_interaction=False),
    }

    def get(name):
        if name not in cache:
            trn, val = small_split
            start = time.perf_counter()
            result = tr.train(trn, val, variants[name], tr.TrainConfig.preset("desk"))
            cache[name] = Trained(variants[name], result, time.perf_counter() - start)
        return cache[name]
    return get


def _report(model, scenes, graph):
    return mt.evaluate(mt.ModelPredictor(model.params, model.config), scenes, graph)


# --------------------------------------------------------------------------
# 1. gradients

def test_criterion_01_gradients(tiny_dataset, verdict):
    start = time.perf_counter()
    public = {"matmul", "affine", "bmv", "weighted_sum", "conv1d", "add", "sub", "mul", "scale", "shift", "tanh",
              "sigmoid", "exp", "log", "clip", "softmax", "concat", "stack", "reshape", "getitem", "sum", "mean",
              "cumsum", "max_pool", "mean_pool", "lstm_gates_step", "lstm_step"}
    assert public <= set(PRIMITIVES), f"untested primitives: {sorted(public - set(PRIMITIVES))}"
    worst_primitive = {name: max(_grad_check(name, seed) for seed in range(20)) for name in sorted(PRIMITIVES)}

    rng = np.random.default_rng(0)
    picks = rng.choice(len(tiny_dataset.scenes), 5, replace=False)
    batch = collate([tiny_dataset.scenes[i] for i in picks])
    cfg = nw.ModelConfig()
    params = nw.init_params(cfg, 1)
    _, grads = tr.loss_and_grads(batch, params, cfg)
    work = {k: v.copy() for k, v in params.items()}
    tensors = {k: dc.constant(v) for k, v in work.items()}

    def terms():
        _, lane, pos = tr.batch_loss(batch, tensors, cfg)
        return float(lane.data), float(pos.data)

    numeric = central_difference(terms, work, eps=FD_EPS, entries=12, rng=np.random.default_rng(1))
    graph_err = max_rel_error(grads, numeric)
    elapsed = time.perf_counter() - start

    bad = {k: v for k, v in worst_primitive.items() if v >= PRIMITIVE_RTOL}
    ok = not bad and graph_err < GRAPH_RTOL and elapsed < GRADIENT_BUDGET_S
    verdict(1, "gradient correctness", ok,
            f"primitives max {max(worst_primitive.values()):.1e} (<{PRIMITIVE_RTOL}), "
            f"full graph {graph_err:.1e} (<{GRAPH_RTOL}), {elapsed:.0f}s")
    assert not bad, bad
    assert graph_err < GRAPH_RTOL
    assert elapsed < GRADIENT_BUDGET_S


# --------------------------------------------------------------------------
# 2. distributions

def _check_distribution(p, mask=None):
    p = np.asarray(p)
    errs = [abs(p.sum(axis=-1) - 1.0).max(), 0.0 if p.min() >= 0 else 1.0]
    if mask is not None:
        errs.append(0.0 if np.all(p[~mask] == 0.0) else 1.0)
    return max(errs)


def _random_mask(rng, rows, width):
    """At least one entry per row stays visible."""
    mask = rng.random((rows, width)) < 0.7
    mask[np.arange(rows), rng.integers(0, width, rows)] = True
    return mask


def test_criterion_02_distributions(tiny_dataset, verdict):
    rng = np.random.default_rng(2)
    cfg = nw.ModelConfig()
    p = nw.as_tensors(nw.init_params(cfg, 0))
    n = 1000
    worst = {}

    logits = rng.normal(size=(n, 7)) * rng.uniform(0.1, 30.0, (n, 1))
    mask = _random_mask(rng, n, 7)
    worst["softmax"] = max(_check_distribution(dc.softmax(dc.constant(logits)).data),
                           _check_distribution(dc.softmax(dc.constant(logits), mask).data, mask))

    target = rng.normal(size=(n, cfg.motion_dim)) * 3
    lanes = rng.normal(size=(n, 6, cfg.lane_dim)) * 3
    lane_mask = _random_mask(rng, n, 6)
    worst["lane_attention"] = _check_distribution(
        nw.lane_attention(dc.constant(target), dc.constant(lanes), lane_mask, p).data, lane_mask)
    others = rng.normal(size=(n, 5, cfg.motion_dim)) * 3
    other_mask = _random_mask(rng, n, 5)
    worst["interaction_weights"] = _check_distribution(
        nw.interaction_weights(dc.constant(target), dc.constant(others), other_mask, p).data, other_mask)

    targets = [tr.smoothed_lane_target(int(k), int(rng.integers(0, k)), float(rng.uniform(0.05, 1.0)))
               for k in rng.integers(1, 12, n)]
    worst["smoothed_lane_target"] = max(_check_distribution(t) for t in targets)

    scenes = tiny_dataset.scenes
    done, prob_err = 0, 0.0
    while done < n:
        k = int(rng.integers(1, 9))
        params = nw.init_params(cfg, int(rng.integers(0, 1 << 30)))
        chunk = [scenes[i] for i in rng.choice(len(scenes), min(64, n - done), replace=False)]
        for hyps in nw.predict_batch(chunk, params, cfg, k, seed=int(rng.integers(0, 1 << 30)), world=False):
            prob_err = max(prob_err, _check_distribution([h.probability for h in hyps]))
        done += len(chunk)
    worst["predict_multimodal"] = prob_err

    ok = max(worst.values()) <= SUM_TOL
    verdict(2, "distribution invariants", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok, worst


# --------------------------------------------------------------------------
# 3. analytic values

def test_criterion_03_analytic_values(verdict):
    steps = 30
    nll = tr.position_nll(np.zeros((steps, 2)), np.ones((steps, 2)), np.zeros(steps), np.zeros((steps, 2)))
    nll_err = abs(nll / steps - math.log(2 * math.pi))
    lane = tr.lane_loss(np.full(5, 0.2), tr.smoothed_lane_target(5, 0, 0.8))
    lane_err = abs(lane - math.log(5) / 5)
    fde = mt.fde([[0.0, 0.0], [3.0, 4.0]], [[0.0, 0.0], [0.0, 0.0]])
    ok = nll_err <= ANALYTIC_TOL and lane_err <= ANALYTIC_TOL and fde == 5.0
    verdict(3, "analytic values", ok, f"nll/step err {nll_err:.1e}, lane loss err {lane_err:.1e}, fde {fde}")
    assert nll_err <= ANALYTIC_TOL and lane_err <= ANALYTIC_TOL
    assert fde == 5.0


# --------------------------------------------------------------------------
# 4. metric oracles

def _hyp(mu, prob):
    return GaussianTrajectory(mu, np.ones_like(mu), np.zeros(len(mu)), prob, None)


def test_criterion_04_metric_oracles(trained_models, small_split, small_dataset, verdict):
    rng = np.random.default_rng(4)
    worst = {"ade": 0.0, "fde": 0.0, "dac": 0.0, "mr": 0.0}
    polys = [np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]]),
             np.array([[12.0, 0.0], [22.0, 1.0], [20.0, 9.0], [13.0, 12.0]]),
             np.array([[20.0, 20.0], [30.0, 22.0], [24.0, 30.0]])]
    graph = LaneGraph({}, polys)
    preds, gts = [], []
    for _ in range(100):
        pred, gt = rng.normal(size=(30, 2)) * 10, rng.normal(size=(30, 2)) * 10
        worst["ade"] = max(worst["ade"], abs(mt.ade(pred, gt) - brute_ade(pred, gt)))
        worst["fde"] = max(worst["fde"], abs(mt.fde(pred, gt) - brute_fde(pred, gt)))
        traj = np.cumsum(rng.normal(size=(30, 2)) * 0.5, axis=0) + rng.uniform(0, 25, 2)
        want = float(all(any(ray_cast_inside(q, poly) for poly in polys) for q in traj))
        worst["dac"] = max(worst["dac"], abs(mt.dac([traj], graph) - want))
        gts.append(gt)
        preds.append([_hyp(gt + rng.normal(size=(30, 2)) * 1.5, w) for w in rng.dirichlet(np.ones(6))])
    for k in (1, 3, 6):
        brute = []
        for hyps, gt in zip(preds, gts):
            order = sorted(range(6), key=lambda i: (-hyps[i].probability, i))[:k]
            brute.append(min(brute_fde(hyps[i].mu, gt) for i in order) > 2.0)
        worst["mr"] = max(worst["mr"], abs(mt.miss_rate(preds, gts, k) - np.mean(brute)))

    full = trained_models("full")
    rep = _report(full, small_split[1], small_dataset.graph)
    monotone = bool(np.all(rep.min_fde[3] <= rep.min_fde[1]) and np.all(rep.min_fde[6] <= rep.min_fde[3]))

    ok = max(worst["ade"], worst["fde"], worst["mr"]) <= ORACLE_TOL and worst["dac"] <= GEOMETRY_TOL and monotone
    verdict(4, "metric oracles", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + f", minFDE monotone in K on all {len(rep.min_fde[1])} scenes: {monotone}")
    assert max(worst["ade"], worst["fde"], worst["mr"]) <= ORACLE_TOL
    assert worst["dac"] <= GEOMETRY_TOL
    assert monotone


# --------------------------------------------------------------------------
# 5. overfit

def test_criterion_05_overfit(tiny_dataset, verdict):
    scenes = tiny_dataset.scenes[:8]
    cfg = nw.ModelConfig()
    start = time.perf_counter()
    result = tr.train(scenes, [], cfg, tr.TrainConfig.preset("overfit"))
    elapsed = time.perf_counter() - start
    first, last = result.history[0]["train_total"], result.history[-1]["train_total"]
    reduction = (first - last) / abs(first)
    acc = mt.lane_accuracy(scenes, result.params, cfg)
    ok = len(result.history) == 300 and reduction >= OVERFIT_REDUCTION and acc == 1.0 and elapsed < OVERFIT_BUDGET_S
    verdict(5, "overfit sanity", ok, f"loss {first:.1f} -> {last:.2f} ({reduction:.1%} reduction), "
            f"lane accuracy {acc:.0%}, {elapsed:.0f}s")
    assert len(result.history) == 300
    assert reduction >= OVERFIT_REDUCTION
    assert acc == 1.0
    assert elapsed < OVERFIT_BUDGET_S


# --------------------------------------------------------------------------
# 6. lane intention

def test_criterion_06_lane_intention(trained_models, small_split, small_dataset, verdict):
    full = trained_models("full")
    val = small_split[1]
    held = [s for s in val if s.behavior in ("turn-left", "turn-right", "fork-branch")]
    acc = mt.lane_accuracy(held, full.params, full.config, label="intended")
    ns_share = np.mean([s.ns_flag for s in small_dataset.scenes])
    elapsed = small_dataset.generation_seconds + full.seconds
    ok = acc >= INTENT_ACCURACY and elapsed < INTENT_BUDGET_S
    verdict(6, "lane-intention learning", ok,
            f"held-out turn/fork accuracy {acc:.3f} on {len(held)} scenes (>= {INTENT_ACCURACY}), "
            f"{len(small_dataset.scenes)} scenes with NS share {ns_share:.2f}, "
            f"generate+train {elapsed:.0f}s")
    assert len(small_dataset.scenes) == 2000
    assert acc >= INTENT_ACCURACY
    assert elapsed < INTENT_BUDGET_S


# --------------------------------------------------------------------------
# 7. ablation ordering

def test_criterion_07_ablation_ordering(trained_models, small_split, small_dataset, verdict):
    val = small_split[1]
    reps = {name: _report(trained_models(name), val, small_dataset.graph) for name in ("full", "lstm", "lstm_lane")}

    def ade(name, subset):
        return reps[name].blocks[subset][1].ade

    full_vs_lstm = ade("full", "full") <= ade("lstm", "full")
    gain_full = ade("lstm", "full") - ade("lstm_lane", "full")
    gain_ns = ade("lstm", "ns") - ade("lstm_lane", "ns")
    lanes_help_ns_more = gain_ns > gain_full
    blk = reps["full"].blocks["full"]
    monotone = blk[3].fde <= blk[1].fde and blk[6].fde <= blk[3].fde
    ok = full_vs_lstm and lanes_help_ns_more and monotone
    verdict(7, "ablation ordering", ok,
            f"(a) K=1 ADE full {ade('full', 'full'):.3f} vs LSTM {ade('lstm', 'full'):.3f}; "
            f"(b) lane gain NS {gain_ns:.3f} vs full {gain_full:.3f}; "
            f"(c) minFDE K=1/3/6 {blk[1].fde:.3f}/{blk[3].fde:.3f}/{blk[6].fde:.3f}")
    assert full_vs_lstm
    assert lanes_help_ns_more
    assert monotone


# --------------------------------------------------------------------------
# 8. fork divergence

def test_criterion_08_fork_divergence(trained_models, small_dataset, verdict):
    full = trained_models("full")
    forks = [s for s in small_dataset.scenes if s.behavior == "fork-branch"]
    gaps = []
    for s in forks:
        branches = [i for i, lid in enumerate(s.lane_ids) if lid.endswith(("-BL", "-BR"))]
        assert len(branches) == 2, f"{s.scene_id}: branch lanes {s.lane_ids}"
        a, b = nw.decode_lanes(s, branches, full.params, full.config)
        gaps.append(float(np.linalg.norm(a[-1] - b[-1])))
    ok = bool(forks) and min(gaps) >= FORK_DIVERGENCE_M
    verdict(8, "fork divergence", ok,
            f"{len(forks)} fork scenes, endpoint gap min {min(gaps):.2f} m, mean {np.mean(gaps):.2f} m")
    assert forks and min(gaps) >= FORK_DIVERGENCE_M


# --------------------------------------------------------------------------
# 9. equivariance

def test_criterion_09_equivariance(trained_models, tiny_dataset, verdict):
    full = trained_models("full")
    rng = np.random.default_rng(9)
    cfg = SceneConfig()
    ids = sorted(tiny_dataset.tracks)
    worst = 0.0
    for sid in rng.choice(ids, 20, replace=False):
        angle, shift = rng.uniform(-math.pi, math.pi), rng.uniform(-5e3, 5e3, 2)
        motion = Pose2(*shift, angle)
        moved_graph = transform_graph(tiny_dataset.graph, angle, shift)
        parsed = {tid: (otype, ts, xy) for tid, otype, ts, xy in tiny_dataset.tracks[sid]}
        moved = {tid: (otype, ts, motion.to_world(xy)) for tid, (otype, ts, xy) in parsed.items()}
        (base,) = scenes_from_sequence(sid, parsed, tiny_dataset.graph, cfg)
        (other,) = scenes_from_sequence(sid, moved, moved_graph, cfg)
        k = int(rng.integers(1, 7))
        seed = int(rng.integers(0, 1000))
        a = nw.predict_multimodal(base, full.params, full.config, k, seed)
        b = nw.predict_multimodal(other, full.params, full.config, k, seed)
        assert len(a) == len(b)
        for ha, hb in zip(a, b):
            worst = max(worst, float(np.abs(motion.to_world(ha.mu) - hb.mu).max()),
                        abs(ha.probability - hb.probability))
    ok = worst <= EQUIVARIANCE_TOL
    verdict(9, "equivariance", ok, f"max deviation {worst:.1e} m over 20 scenes")
    assert ok


# --------------------------------------------------------------------------
# 10. determinism

def test_criterion_10_determinism(tmp_path, verdict, capsys):
    for run in ("a", "b"):
        root = tmp_path / run
        assert cli.main(["generate", "--preset", "tiny", "--seed", "11", "--out", str(root / "data")]) == 0
        assert cli.main(["train", "--data", str(root / "data"), "--preset", "tiny", "--seed", "11",
                         "--out", str(root / "run")]) == 0
        assert cli.main(["eval", "--data", str(root / "data"), "--checkpoint", str(root / "run" / "best.ckpt"),
                         "--seed", "11", "--out", str(root / "eval")]) == 0
    compared = ["data/manifest.json", "run/last.ckpt", "run/best.ckpt", "run/train_log.jsonl",
                "eval/report.json", "eval/report.txt"]
    same = {rel: (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes() for rel in compared}
    json.loads((tmp_path / "a" / "eval" / "report.json").read_text())
    ok = all(same.values())
    verdict(10, "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok, same
