"""Lane-attention trajectory model.

Forward pass, batched over scenes:

* two LSTMs encode observed positions and velocities; their final hidden
  states are concatenated into a motion feature per agent;
* a shared encoder (1-D convs with kernel 1, tanh, max-pool over points, MLP)
  maps each candidate lane centerline to a lane feature;
* dot-product attention between the embedded target feature and embedded
  lane features gives a probability per lane;
* dot-product attention over other agents (one shared embedding for both
  sides) gives an interaction feature;
* an LSTM decoder fed ``target || interaction || lane`` at every step emits a
  bivariate Gaussian per future step.

Parameters are plain ``name -> ndarray`` dicts.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .dataset import Scene, SceneBatch, collate
from .diffcore import Tensor
from .errors import AttentionError, DimensionError, UsageError

SIGMA_MIN, SIGMA_MAX = 1e-3, 1e3
RHO_SCALE = 0.999
LOG_SIGMA_MIN, LOG_SIGMA_MAX = float(np.log(SIGMA_MIN)), float(np.log(SIGMA_MAX))


@dataclass(frozen=True)
class ModelConfig:
    traj_hidden: int = 64
    lane_channels: int = 64
    lane_dim: int = 128
    embed_dim: int = 64
    dec_hidden: int = 128
    obs_len: int = 20
    horizon: int = 30
    lane_points: int = 10
    use_lanes: bool = True
    use_interaction: bool = True
    # metres -> network units for every geometric input
    input_scale: float = 0.1

    @property
    def motion_dim(self) -> int:
        return 2 * self.traj_hidden

    @property
    def decoder_input(self) -> int:
        n = self.motion_dim
        if self.use_interaction:
            n += self.motion_dim
        if self.use_lanes:
            n += self.lane_dim
        return n

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, dh = cfg.traj_hidden, cfg.dec_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for name in ("pos_lstm", "vel_lstm"):
        shapes[f"{name}.w_x"] = (2, 4 * h)
        shapes[f"{name}.w_h"] = (h, 4 * h)
        shapes[f"{name}.b"] = (4 * h,)
    if cfg.use_lanes:
        c = cfg.lane_channels
        shapes.update({
            "lane_conv1.w": (c, 2, 1), "lane_conv1.b": (c,),
            "lane_conv2.w": (c, c, 1), "lane_conv2.b": (c,),
            "lane_mlp.w": (c, cfg.lane_dim), "lane_mlp.b": (cfg.lane_dim,),
            "W_t": (cfg.motion_dim, cfg.embed_dim),
            "W_l": (cfg.lane_dim, cfg.embed_dim),
        })
    if cfg.use_interaction:
        shapes["W_I"] = (cfg.motion_dim, cfg.embed_dim)
    shapes["decoder_lstm.w_x"] = (cfg.decoder_input, 4 * dh)
    shapes["decoder_lstm.w_h"] = (dh, 4 * dh)
    shapes["decoder_lstm.b"] = (4 * dh,)
    shapes["decoder_head.w"] = (dh, 5)
    shapes["decoder_head.b"] = (5,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], shapes: Mapping[str, tuple[int, ...]]) -> int:
    block = name.rsplit(".", 1)[0]
    if name.endswith("_lstm.w_x") or name.endswith("_lstm.w_h") or name.endswith("_lstm.b"):
        return shapes[f"{block}.w_x"][0] + shapes[f"{block}.w_h"][0]
    if block.startswith("lane_conv"):
        w = shapes[f"{block}.w"]
        return w[1] * w[2]
    if name.endswith(".b"):
        return shapes[f"{block}.w"][0]
    return shape[0]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights; zero biases except LSTM forget gates at +1."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            b = np.zeros(shape)
            if "_lstm" in name:
                h = shape[0] // 4
                b[h:2 * h] = 1.0
            params[name] = b
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape, shapes))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def as_tensors(params: Mapping[str, np.ndarray], trainable: bool = False) -> dict[str, Tensor]:
    if trainable:
        return {k: dc.parameter(v, name=k) for k, v in params.items()}
    return {k: dc.constant(v) for k, v in params.items()}


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DimensionError(f"parameter names differ from config: missing {missing}, unexpected {extra}")
    for k, shape in expected.items():
        if tuple(params[k].shape) != shape:
            raise DimensionError(f"parameter {k} has shape {params[k].shape}, expected {shape}")


def _lstm(p: Mapping[str, Tensor], prefix: str) -> dc.LSTMWeights:
    return dc.LSTMWeights(p[f"{prefix}.w_x"], p[f"{prefix}.w_h"], p[f"{prefix}.b"])


# --------------------------------------------------------------------------
# encoders

def _run_lstm(seq: np.ndarray, weights: dc.LSTMWeights) -> Tensor:
    """Final hidden state after feeding ``seq [N, T, d]`` in time order from zero state."""
    n, steps = seq.shape[0], seq.shape[1]
    h = dc.constant(np.zeros((n, weights.hidden)))
    c = dc.constant(np.zeros((n, weights.hidden)))
    for t in range(steps):
        h, c = dc.lstm_step(dc.constant(seq[:, t]), h, c, weights)
    return h


def encode_trajectories(positions: np.ndarray, velocities: np.ndarray, p: Mapping[str, Tensor],
                        cfg: ModelConfig) -> Tensor:
    """Motion features ``[N, 2*traj_hidden]`` for ``[N, obs_len, 2]`` inputs."""
    if positions.shape[1:] != (cfg.obs_len, 2) or velocities.shape != positions.shape:
        raise DimensionError(f"trajectory inputs must be [N, {cfg.obs_len}, 2], got {positions.shape} / "
                             f"{velocities.shape}")
    s = cfg.input_scale
    g_pos = _run_lstm(positions * s, _lstm(p, "pos_lstm"))
    g_vel = _run_lstm(velocities * s, _lstm(p, "vel_lstm"))
    return dc.concat([g_pos, g_vel], axis=1)


def encode_trajectory(positions, velocities, params: Mapping[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Single-agent convenience wrapper returning a plain vector."""
    pos = np.asarray(positions, dtype=np.float64)[None]
    vel = np.asarray(velocities, dtype=np.float64)[None]
    return encode_trajectories(pos, vel, as_tensors(params), cfg).data[0]


def encode_lanes(lanes: np.ndarray, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Lane features ``[N, lane_dim]`` for centerlines ``[N, lane_points, 2]``."""
    if lanes.ndim != 3 or lanes.shape[1:] != (cfg.lane_points, 2):
        raise DimensionError(f"lane inputs must be [N, {cfg.lane_points}, 2], got {lanes.shape}")
    x = dc.constant(np.ascontiguousarray(lanes.transpose(0, 2, 1)) * cfg.input_scale)
    x = dc.tanh(dc.conv1d(x, p["lane_conv1.w"], p["lane_conv1.b"]))
    x = dc.tanh(dc.conv1d(x, p["lane_conv2.w"], p["lane_conv2.b"]))
    pooled = dc.max_pool(x, axis=2)
    return dc.tanh(dc.affine(pooled, p["lane_mlp.w"], p["lane_mlp.b"]))


def encode_lane(centerline, params: Mapping[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    return encode_lanes(np.asarray(centerline, dtype=np.float64)[None], as_tensors(params), cfg).data[0]


# --------------------------------------------------------------------------
# attention

def _embed(features: Tensor, w: Tensor) -> Tensor:
    """Row-wise ``W^T f`` for ``[B, d]`` or ``[B, L, d]`` features."""
    if features.ndim == 2:
        return dc.matmul(features, w)
    b, n, d = features.shape
    flat = dc.matmul(dc.reshape(features, (b * n, d)), w)
    return dc.reshape(flat, (b, n, w.shape[1]))


def lane_attention(target: Tensor, lanes: Tensor, mask: np.ndarray, p: Mapping[str, Tensor]) -> Tensor:
    """Probability per lane ``[B, L]``; masked lanes get exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise AttentionError("every lane of some scene is masked")
    logits = dc.bmv(_embed(lanes, p["W_l"]), _embed(target, p["W_t"]))
    return dc.softmax(logits, mask)


def interaction_weights(target: Tensor, others: Tensor, mask: np.ndarray, p: Mapping[str, Tensor]) -> Tensor:
    w = p["W_I"]
    return dc.softmax(dc.bmv(_embed(others, w), _embed(target, w)), np.asarray(mask, dtype=bool))


def interaction(target: Tensor, others: Tensor, mask: np.ndarray, p: Mapping[str, Tensor]) -> Tensor:
    """Attention-weighted sum of raw neighbour features; zero when there are none."""
    return dc.weighted_sum(interaction_weights(target, others, mask, p), others)


# --------------------------------------------------------------------------
# decoder

@dataclass
class GaussianOutput:
    """Per-step Gaussians, batched ``[B, T, ...]``; ``mu`` is absolute (agent frame)."""

    mu: Tensor
    log_sigma: Tensor
    sigma: Tensor
    rho: Tensor


def decode(context: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> GaussianOutput:
    """Unroll the decoder for ``horizon`` steps on a fixed input ``[B, decoder_input]``.

    Head outputs are per-step offsets accumulated from the last observed
    position (the origin of the agent frame).
    """
    weights = _lstm(p, "decoder_lstm")
    if context.ndim != 2 or context.shape[1] != weights.input_dim:
        raise DimensionError(f"decoder input must be [B, {weights.input_dim}], got {context.shape}")
    b = context.shape[0]
    gates_x = dc.affine(context, weights.w_x, weights.b)
    h = dc.constant(np.zeros((b, weights.hidden)))
    c = dc.constant(np.zeros((b, weights.hidden)))
    hidden = []
    for _ in range(cfg.horizon):
        h, c = dc.lstm_gates_step(gates_x, h, c, weights.w_h)
        hidden.append(h)
    hs = dc.reshape(dc.stack(hidden, axis=1), (b * cfg.horizon, weights.hidden))
    raw = dc.reshape(dc.affine(hs, p["decoder_head.w"], p["decoder_head.b"]), (b, cfg.horizon, 5))
    mu = dc.cumsum(raw[:, :, 0:2], axis=1)
    log_sigma = dc.clip(raw[:, :, 2:4], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    rho = dc.scale(dc.tanh(raw[:, :, 4]), RHO_SCALE)
    return GaussianOutput(mu, log_sigma, dc.exp(log_sigma), rho)


def decoder_context(target: Tensor, f_act: Tensor | None, lane: Tensor | None) -> Tensor:
    parts = [target] + [t for t in (f_act, lane) if t is not None]
    return dc.concat(parts, axis=1) if len(parts) > 1 else target


# --------------------------------------------------------------------------
# full forward

@dataclass
class Encoded:
    target: Tensor
    f_act: Tensor | None
    lane_feats: Tensor | None      # [B, L, lane_dim]
    lane_probs: Tensor | None      # [B, L]


def encode_batch(batch: SceneBatch, p: Mapping[str, Tensor], cfg: ModelConfig) -> Encoded:
    b = len(batch)
    n_o = batch.others_pos.shape[1]
    if cfg.use_interaction:
        pos = np.concatenate([batch.obs_pos, batch.others_pos.reshape(b * n_o, cfg.obs_len, 2)])
        vel = np.concatenate([batch.obs_vel, batch.others_vel.reshape(b * n_o, cfg.obs_len, 2)])
        feats = encode_trajectories(pos, vel, p, cfg)
        target = feats[:b]
        others = dc.reshape(feats[b:], (b, n_o, cfg.motion_dim))
        f_act = interaction(target, others, batch.others_mask, p)
    else:
        target = encode_trajectories(batch.obs_pos, batch.obs_vel, p, cfg)
        f_act = None
    lane_feats = lane_probs = None
    if cfg.use_lanes:
        n_l = batch.lanes.shape[1]
        flat = encode_lanes(batch.lanes.reshape(b * n_l, cfg.lane_points, 2), p, cfg)
        lane_feats = dc.reshape(flat, (b, n_l, cfg.lane_dim))
        lane_probs = lane_attention(target, lane_feats, batch.lane_mask, p)
    return Encoded(target, f_act, lane_feats, lane_probs)


def decode_with_lanes(enc: Encoded, lane_index: np.ndarray, p: Mapping[str, Tensor],
                      cfg: ModelConfig) -> GaussianOutput:
    """Decode each scene conditioned on lane ``lane_index[b]`` of scene ``b``."""
    lane = None
    if cfg.use_lanes:
        b = enc.target.shape[0]
        lane = enc.lane_feats[np.arange(b), np.asarray(lane_index, dtype=np.int64)]
    return decode(decoder_context(enc.target, enc.f_act, lane), p, cfg)


# --------------------------------------------------------------------------
# inference

@dataclass
class GaussianTrajectory:
    mu: np.ndarray          # [T, 2]
    sigma: np.ndarray       # [T, 2]
    rho: np.ndarray         # [T]
    probability: float
    source_lane: int | None
    lane_id: str | None = None
    sampled: bool = False

    def transformed(self, frame) -> GaussianTrajectory:
        """Same hypothesis expressed in the world frame of ``frame``.

        Covariances rotate with the frame; they are re-expressed as
        (sigma_x, sigma_y, rho) in the new axes.
        """
        rot = frame.rotation
        cov = np.empty((len(self.rho), 2, 2))
        sx, sy = self.sigma[:, 0], self.sigma[:, 1]
        cov[:, 0, 0], cov[:, 1, 1] = sx * sx, sy * sy
        cov[:, 0, 1] = cov[:, 1, 0] = self.rho * sx * sy
        cov = rot @ cov @ rot.T
        nsx, nsy = np.sqrt(cov[:, 0, 0]), np.sqrt(cov[:, 1, 1])
        return GaussianTrajectory(frame.to_world(self.mu), np.column_stack([nsx, nsy]),
                                  cov[:, 0, 1] / (nsx * nsy), self.probability, self.source_lane,
                                  self.lane_id, self.sampled)


def _scene_rng(seed: int, scene_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(scene_id.encode())]))


def _sample_steps(mu, sigma, rho, rng) -> np.ndarray:
    z = rng.standard_normal(mu.shape)
    x = mu[:, 0] + sigma[:, 0] * z[:, 0]
    y = mu[:, 1] + sigma[:, 1] * (rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1])
    return np.column_stack([x, y])


def rank_lanes(probs: np.ndarray) -> np.ndarray:
    """Indices by probability descending, ties by lower index."""
    return np.lexsort((np.arange(len(probs)), -probs))


def predict_batch(scenes: Sequence[Scene], params: Mapping[str, np.ndarray], cfg: ModelConfig, k: int,
                  seed: int = 0, world: bool = True) -> list[list[GaussianTrajectory]]:
    """K hypotheses per scene with probabilities summing to 1.

    The top ``min(K, n)`` lanes by attention are decoded. When ``K > n`` the
    remaining hypotheses are drawn step by step from the top-1 Gaussians; the
    top-1 probability is split evenly over itself and the draws before the
    final renormalization.
    """
    if k < 1:
        raise UsageError("K must be at least 1")
    if not scenes:
        return []
    p = as_tensors(params)
    batch = collate(scenes)
    enc = encode_batch(batch, p, cfg)
    b = len(batch)
    if cfg.use_lanes:
        probs = enc.lane_probs.data
        n_l = batch.lanes.shape[1]
        rows = np.repeat(np.arange(b), n_l)
        cols = np.tile(np.arange(n_l), b)
        target = enc.target[rows]
        f_act = enc.f_act[rows] if enc.f_act is not None else None
        out = decode(decoder_context(target, f_act, enc.lane_feats[rows, cols]), p, cfg)
        mu = out.mu.data.reshape(b, n_l, cfg.horizon, 2)
        sig = out.sigma.data.reshape(b, n_l, cfg.horizon, 2)
        rho = out.rho.data.reshape(b, n_l, cfg.horizon)
    else:
        probs = np.ones((b, 1))
        out = decode(decoder_context(enc.target, enc.f_act, None), p, cfg)
        mu, sig, rho = out.mu.data[:, None], out.sigma.data[:, None], out.rho.data[:, None]

    results = []
    for i, scene in enumerate(scenes):
        n = scene.num_lanes if cfg.use_lanes else 1
        order = rank_lanes(probs[i, :n])
        hyps = []
        for j in order[: min(k, n)]:
            lane_id = scene.lane_ids[j] if cfg.use_lanes else None
            hyps.append(GaussianTrajectory(mu[i, j].copy(), sig[i, j].copy(), rho[i, j].copy(),
                                           float(probs[i, j]), int(j) if cfg.use_lanes else None, lane_id))
        if k > n:
            top = hyps[0]
            share = top.probability / (k - n + 1)
            top.probability = share
            rng = _scene_rng(seed, scene.scene_id)
            for _ in range(k - n):
                hyps.append(GaussianTrajectory(_sample_steps(top.mu, top.sigma, top.rho, rng), top.sigma.copy(),
                                               top.rho.copy(), share, None, None, sampled=True))
        total = sum(h.probability for h in hyps)
        for h in hyps:
            h.probability = h.probability / total
        if world:
            hyps = [h.transformed(scene.frame) for h in hyps]
        results.append(hyps)
    return results


def predict_multimodal(scene: Scene, params: Mapping[str, np.ndarray], cfg: ModelConfig, k: int,
                       seed: int = 0) -> list[GaussianTrajectory]:
    return predict_batch([scene], params, cfg, k, seed)[0]


def decode_lanes(scene: Scene, lane_indices: Sequence[int], params: Mapping[str, np.ndarray],
                 cfg: ModelConfig, world: bool = True) -> list[np.ndarray]:
    """Mean trajectories of one scene conditioned on each listed lane."""
    p = as_tensors(params)
    batch = collate([scene])
    enc = encode_batch(batch, p, cfg)
    rows = np.zeros(len(lane_indices), dtype=np.int64)
    f_act = enc.f_act[rows] if enc.f_act is not None else None
    lanes = enc.lane_feats[rows, np.asarray(lane_indices, dtype=np.int64)]
    mu = decode(decoder_context(enc.target[rows], f_act, lanes), p, cfg).mu.data
    return [scene.frame.to_world(m) if world else m for m in mu]
