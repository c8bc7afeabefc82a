"""Losses, Adam, the two-phase training loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from . import network as nw
from .dataset import Scene, SceneBatch, collate, make_batches
from .diffcore import Tensor
from .errors import CheckpointError, ConfigError, DimensionError, NumericError, UsageError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr_phase1: float = 1e-2
    epochs_phase1: int = 60
    lr_phase2: float = 1e-3
    epochs_phase2: int = 5
    p_s: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "lr_phase1", "lr_phase2", "adam_eps", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("epochs_phase1", "epochs_phase2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 < self.p_s <= 1.0:
            raise ConfigError(f"p_s must lie in (0, 1], got {self.p_s}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")

    @property
    def epochs(self) -> int:
        return self.epochs_phase1 + self.epochs_phase2

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr_phase1 if epoch <= self.epochs_phase1 else self.lr_phase2

    @classmethod
    def preset(cls, name: str, **overrides) -> TrainConfig:
        try:
            base = TRAIN_PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown training preset {name!r}; choose from {sorted(TRAIN_PRESETS)}") from None
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


TRAIN_PRESETS = {
    "large-batch": TrainConfig(batch_size=1024, lr_phase1=1e-2, epochs_phase1=50, lr_phase2=1e-3, epochs_phase2=5),
    "desk": TrainConfig(batch_size=32, lr_phase1=1e-2, epochs_phase1=60, lr_phase2=1e-3, epochs_phase2=5),
    "tiny": TrainConfig(batch_size=16, lr_phase1=1e-2, epochs_phase1=3, lr_phase2=1e-3, epochs_phase2=1),
    "overfit": TrainConfig(batch_size=8, lr_phase1=1e-2, epochs_phase1=270, lr_phase2=1e-3, epochs_phase2=30),
}


# --------------------------------------------------------------------------
# losses

def smoothed_lane_target(n: int, gt: int, p_s: float = 0.8) -> np.ndarray:
    if n < 1:
        raise UsageError("need at least one lane")
    if not 0 <= gt < n:
        raise UsageError(f"ground-truth index {gt} out of range for {n} lanes")
    if not 0.0 < p_s <= 1.0:
        raise UsageError(f"p_s must lie in (0, 1], got {p_s}")
    if n == 1:
        return np.ones(1)
    t = np.full(n, (1.0 - p_s) / (n - 1))
    t[gt] = p_s
    return t


def lane_loss(probs, targets) -> float:
    """Smoothed cross-entropy, averaged over the scene's lanes."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape or probs.ndim != 1:
        raise DimensionError(f"probabilities {probs.shape} and targets {targets.shape} must be equal-length vectors")
    return float(-np.sum(targets * np.log(np.maximum(probs, PROB_FLOOR))) / len(probs))


def _nll_terms(mu: Tensor, log_sigma: Tensor, rho: Tensor, gt: np.ndarray) -> Tensor:
    """Per-step bivariate negative log density, shape ``gt.shape[:-1]``."""
    inv_sigma = dc.exp(dc.scale(log_sigma, -1.0))
    d = dc.mul(dc.sub(dc.constant(gt), mu), inv_sigma)
    dx, dy = d[..., 0], d[..., 1]
    one_minus = dc.shift(dc.scale(dc.mul(rho, rho), -1.0), 1.0)
    log_one_minus = dc.log(one_minus)
    quad = dc.sub(dc.add(dc.mul(dx, dx), dc.mul(dy, dy)), dc.scale(dc.mul(rho, dc.mul(dx, dy)), 2.0))
    maha = dc.mul(quad, dc.exp(dc.scale(log_one_minus, -1.0)))
    return dc.shift(dc.add(dc.add(log_sigma[..., 0], log_sigma[..., 1]),
                           dc.add(dc.scale(log_one_minus, 0.5), dc.scale(maha, 0.5))), LOG_2PI)


def position_nll(mu, sigma, rho, gt) -> float:
    """Sum over steps of the bivariate Gaussian negative log density."""
    mu, sigma, rho, gt = (np.asarray(a, dtype=np.float64) for a in (mu, sigma, rho, gt))
    if mu.shape != gt.shape or sigma.shape != gt.shape or rho.shape != gt.shape[:-1]:
        raise DimensionError(f"shape mismatch: mu {mu.shape}, sigma {sigma.shape}, rho {rho.shape}, gt {gt.shape}")
    if not (np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
        raise NumericError("sigma must be finite and positive")
    if not np.all(np.abs(rho) < 1):
        raise NumericError("|rho| must be below 1")
    terms = _nll_terms(dc.constant(mu), dc.constant(np.log(sigma)), dc.constant(rho), gt)
    return float(np.sum(terms.data))


@dataclass
class LossBreakdown:
    total: float
    lane: float
    pos: float

    def as_dict(self) -> dict:
        return {"total": self.total, "lane": self.lane, "pos": self.pos}


def smoothed_targets(batch: SceneBatch, p_s: float) -> np.ndarray:
    """Lane targets ``[B, L]`` already divided by each scene's lane count; zero on padding."""
    out = np.zeros(batch.lane_mask.shape)
    for i, s in enumerate(batch.scenes):
        out[i, : s.num_lanes] = smoothed_lane_target(s.num_lanes, int(s.gt_lane), p_s) / s.num_lanes
    return out


def batch_loss(batch: SceneBatch, p: Mapping[str, Tensor], cfg: nw.ModelConfig, p_s: float = 0.8,
               enc: nw.Encoded | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Mean over scenes of (total, lane, pos); the decoder sees the ground-truth lane."""
    b = len(batch)
    if enc is None:
        enc = nw.encode_batch(batch, p, cfg)
    out = nw.decode_with_lanes(enc, batch.gt_lane, p, cfg)
    pos = dc.scale(dc.sum(_nll_terms(out.mu, out.log_sigma, out.rho, batch.future)), 1.0 / b)
    if cfg.use_lanes:
        weights = dc.constant(smoothed_targets(batch, p_s))
        logp = dc.log(dc.clip(enc.lane_probs, PROB_FLOOR, np.inf))
        lane = dc.scale(dc.sum(dc.mul(weights, logp)), -1.0 / b)
    else:
        lane = dc.constant(0.0)
    return dc.add(lane, pos), lane, pos


def total_loss(scene: Scene, params: Mapping[str, np.ndarray], cfg: nw.ModelConfig,
               p_s: float = 0.8) -> LossBreakdown:
    total, lane, pos = batch_loss(collate([scene]), nw.as_tensors(params), cfg, p_s)
    return LossBreakdown(float(total.data), float(lane.data), float(pos.data))


def loss_and_grads(scenes: Sequence[Scene] | SceneBatch, params: Mapping[str, np.ndarray], cfg: nw.ModelConfig,
                   p_s: float = 0.8) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    batch = scenes if isinstance(scenes, SceneBatch) else collate(scenes)
    p = nw.as_tensors(params, trainable=True)
    total, lane, pos = batch_loss(batch, p, cfg, p_s)
    grads = dc.backward(total, p)
    return LossBreakdown(float(total.data), float(lane.data), float(pos.data)), grads


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


@dataclass
class StepInfo:
    grad_norm: float
    clipped: bool
    skipped: bool


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    # fixed name order, so the result does not depend on dict insertion order
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              config: TrainConfig = TrainConfig()) -> tuple[dict[str, np.ndarray], AdamState, StepInfo]:
    """One bias-corrected Adam update after global-norm clipping.

    A non-finite gradient leaves parameters and moments untouched.
    """
    if set(grads) != set(params):
        raise DimensionError("gradient names differ from parameter names")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise DimensionError(f"gradient {k} has shape {grads[k].shape}, parameter has {params[k].shape}")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        log.warning("non-finite gradient norm; skipping optimizer step %d", state.step + 1)
        return dict(params), state, StepInfo(norm, False, True)
    factor = 1.0
    if norm > config.clip_norm:
        factor = config.clip_norm / norm
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    corr1, corr2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k] * factor
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = params[k] - lr * (m / corr1) / (np.sqrt(v / corr2) + config.adam_eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t), StepInfo(norm, factor < 1.0, False)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"LANEATTN-CKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: nw.ModelConfig
    train_config: TrainConfig | None = None
    epoch: int = 0
    adam: AdamState | None = None
    history: list[dict] = field(default_factory=list)


def _config_from_dict(cls, data: Mapping, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise CheckpointError(f"{what} has unknown fields {unknown}")
    return cls(**data)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a checkpoint; the bytes depend only on the contents."""
    tensors = {f"param.{k}": v for k, v in sorted(ckpt.params.items())}
    if ckpt.adam is not None:
        tensors.update({f"adam.m.{k}": v for k, v in sorted(ckpt.adam.m.items())})
        tensors.update({f"adam.v.{k}": v for k, v in sorted(ckpt.adam.v.items())})
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam.step if ckpt.adam is not None else None,
        "history": ckpt.history,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path, model_config: nw.ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint, checking tensor shapes against ``model_config`` (or the echoed one)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<Q", blob, pos)
        header = json.loads(blob[pos + 8: pos + 8 + n])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    data = memoryview(blob)[pos + 8 + n:]
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(data):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        tensors[e["name"]] = np.frombuffer(data[start:stop], dtype="<f8").astype(np.float64).reshape(e["shape"])
    stored_cfg = _config_from_dict(nw.ModelConfig, header["model_config"], "model config")
    cfg = model_config or stored_cfg
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    try:
        nw.check_params(params, cfg)
    except DimensionError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    adam = None
    if header.get("adam_step") is not None:
        m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
        adam = AdamState(m, v, int(header["adam_step"]))
    tcfg = header.get("train_config")
    return Checkpoint(params, cfg, _config_from_dict(TrainConfig, tcfg, "train config") if tcfg else None,
                      int(header["epoch"]), adam, header.get("history", []))


# --------------------------------------------------------------------------
# training loop

def _argmax_ade(enc: nw.Encoded, batch: SceneBatch, p, cfg: nw.ModelConfig) -> np.ndarray:
    if cfg.use_lanes:
        probs = np.where(batch.lane_mask, enc.lane_probs.data, -1.0)
        idx = np.argmax(probs, axis=1)
    else:
        idx = np.zeros(len(batch), dtype=np.int64)
    mu = nw.decode_with_lanes(enc, idx, p, cfg).mu.data
    return np.mean(np.linalg.norm(mu - batch.future, axis=-1), axis=1)


def evaluate_loss(scenes: Sequence[Scene], params: Mapping[str, np.ndarray], cfg: nw.ModelConfig,
                  p_s: float = 0.8, chunk: int = 256) -> dict:
    """Mean losses and top-1 ADE (agent frame) over ``scenes`` without gradients."""
    p = nw.as_tensors(params)
    sums = {"total": 0.0, "lane": 0.0, "pos": 0.0, "ade": 0.0}
    for k in range(0, len(scenes), chunk):
        batch = collate(scenes[k:k + chunk])
        enc = nw.encode_batch(batch, p, cfg)
        total, lane, pos = batch_loss(batch, p, cfg, p_s, enc)
        b = len(batch)
        sums["total"] += float(total.data) * b
        sums["lane"] += float(lane.data) * b
        sums["pos"] += float(pos.data) * b
        sums["ade"] += float(np.sum(_argmax_ade(enc, batch, p, cfg)))
    return {k: v / len(scenes) for k, v in sums.items()}


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    history: list[dict]
    best_epoch: int


LAST_NAME = "last.ckpt"
BEST_NAME = "best.ckpt"
LOG_NAME = "train_log.jsonl"


def _best(history: list[dict]) -> tuple[int, float]:
    best_epoch, best_ade = 0, np.inf
    for rec in history:
        ade = rec.get("val_ade_k1")
        if ade is None:
            ade = rec["train_total"]
        if ade < best_ade:
            best_epoch, best_ade = rec["epoch"], ade
    return best_epoch, best_ade


def train(train_scenes: Sequence[Scene], val_scenes: Sequence[Scene], model_cfg: nw.ModelConfig,
          cfg: TrainConfig, out_dir=None, resume: bool = False,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the two-phase schedule.

    With ``out_dir`` every epoch rewrites ``last.ckpt`` (parameters plus Adam
    moments, enough to resume), ``best.ckpt`` follows the lowest validation
    top-1 ADE, and one JSON line per epoch is appended to the log.
    """
    if not train_scenes:
        raise UsageError("training set is empty")
    train_scenes, val_scenes = list(train_scenes), list(val_scenes)
    out = Path(out_dir) if out_dir is not None else None
    params = nw.init_params(model_cfg, cfg.seed)
    adam = AdamState.zeros(params)
    history: list[dict] = []
    start = 1
    best_params = params
    if resume:
        if out is None or not (out / LAST_NAME).exists():
            raise UsageError("--resume needs an existing last.ckpt in the output directory")
        ck = load_checkpoint(out / LAST_NAME, model_cfg)
        params, adam, history, start = ck.params, ck.adam, list(ck.history), ck.epoch + 1
        if (out / BEST_NAME).exists():
            best_params = load_checkpoint(out / BEST_NAME, model_cfg).params
        if out is not None:
            with open(out / LOG_NAME, "w") as fh:
                for rec in history:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    elif out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / LOG_NAME).write_text("")

    for epoch in range(start, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        sums = np.zeros(3)
        skipped = clipped = 0
        for batch in make_batches(train_scenes, cfg.batch_size, cfg.seed, epoch):
            parts, grads = loss_and_grads(batch, params, model_cfg, cfg.p_s)
            params, adam, info = adam_step(params, grads, adam, lr, cfg)
            skipped += info.skipped
            clipped += info.clipped
            sums += np.array([parts.total, parts.lane, parts.pos]) * len(batch)
        sums /= len(train_scenes)
        rec = {"epoch": epoch, "lr": lr, "train_total": float(sums[0]), "train_lane": float(sums[1]),
               "train_pos": float(sums[2]), "val_total": None, "val_ade_k1": None,
               "clipped_steps": clipped, "skipped_steps": skipped}
        if val_scenes:
            ev = evaluate_loss(val_scenes, params, model_cfg, cfg.p_s)
            rec["val_total"], rec["val_ade_k1"] = ev["total"], ev["ade"]
        history.append(rec)
        best_epoch, _ = _best(history)
        if best_epoch == epoch:
            best_params = params
        if out is not None:
            if best_epoch == epoch:
                save_checkpoint(out / BEST_NAME, Checkpoint(params, model_cfg, cfg, epoch, None, history))
            save_checkpoint(out / LAST_NAME, Checkpoint(params, model_cfg, cfg, epoch, adam, history))
            with open(out / LOG_NAME, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log.info("epoch %d lr %g train %.4f (lane %.4f pos %.4f) val %s", epoch, lr, rec["train_total"],
                 rec["train_lane"], rec["train_pos"], rec["val_total"])
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(params, best_params, history, _best(history)[0])
