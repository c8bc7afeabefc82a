"""Command-line entry point: ``generate``, ``train``, ``eval`` and ``predict``.

Settings resolve as defaults, then preset, then ``--config`` file, then
flags. Each command prints the resolved settings (with where every value came
from) and stores them next to its outputs.

Exit codes: 0 success, 2 usage or config error, 3 data or checkpoint error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import metrics, network, plot, synthetic, training
from .dataset import SceneConfig, load_dataset, read_sequence_csv, scenes_from_sequence, split
from .errors import CheckpointError, ConfigError, DataError, LaneAttnError, NumericError, UsageError
from .mapgeom import LaneGraph

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("laneattn")

_GEN_FIELDS = {f.name for f in fields(synthetic.GeneratorConfig)} - {"counts"}
_SCENE_FIELDS = {f.name for f in fields(SceneConfig)}
_TRAIN_FIELDS = {f.name for f in fields(training.TrainConfig)}
# the model's window lengths follow the data
_MODEL_FIELDS = {f.name for f in fields(network.ModelConfig)} - {"obs_len", "horizon"}
_RUN_FIELDS = {"val_fraction"}
KNOWN_KEYS = _GEN_FIELDS | _SCENE_FIELDS | _TRAIN_FIELDS | _MODEL_FIELDS | _RUN_FIELDS | set(synthetic.BEHAVIORS)


class Settings:
    """Flat settings with provenance per key."""

    def __init__(self):
        self.values: dict = {}
        self.source: dict[str, str] = {}

    def layer(self, values: dict, source: str) -> None:
        for k, v in values.items():
            if v is None:
                continue
            self.values[k] = v
            self.source[k] = source

    def pick(self, names) -> dict:
        return {k: self.values[k] for k in sorted(names) if k in self.values}

    def echo(self) -> dict:
        return {k: {"value": self.values[k], "source": self.source[k]} for k in sorted(self.values)}


def _defaults(*classes) -> dict:
    out = {}
    for cls in classes:
        for f in fields(cls):
            if f.name == "counts":
                continue
            inst = cls()
            out[f.name] = getattr(inst, f.name)
    return out


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a flat JSON object")
    unknown = sorted(set(doc) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    for k, v in doc.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"config field {k!r} must be a scalar")
    return doc


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"invalid {what} settings: {exc}") from exc


def _check_types(values: dict, cls) -> None:
    for f in fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        default = getattr(cls(), f.name)
        if isinstance(default, bool):
            ok = isinstance(v, bool)
        elif isinstance(default, int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(default, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"field {f.name!r} expects {type(default).__name__}, got {v!r}")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _echo(command: str, settings: Settings, out: Path | None) -> None:
    doc = {"command": command, "settings": settings.echo()}
    print(json.dumps(doc, sort_keys=True), flush=True)
    if out is not None:
        _write_json(out / f"{command}_config.json", doc)


def _data_paths(data: Path) -> tuple[Path, Path]:
    seq = data / "sequences" if (data / "sequences").is_dir() else data
    map_path = data / "map.json"
    if not map_path.exists():
        map_path = data.parent / "map.json"
    return seq, map_path


def _scene_config(settings: Settings) -> SceneConfig:
    vals = settings.pick(_SCENE_FIELDS)
    _check_types(vals, SceneConfig)
    return _build(SceneConfig, vals, "scene")


def _model_config(settings: Settings, scene_cfg: SceneConfig) -> network.ModelConfig:
    vals = settings.pick(_MODEL_FIELDS)
    _check_types(vals, network.ModelConfig)
    return _build(network.ModelConfig, {**vals, "obs_len": scene_cfg.obs_len, "horizon": scene_cfg.fut_len},
                  "model")


# --------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    file_cfg = read_config(args.config)
    settings = Settings()
    settings.layer(_defaults(synthetic.GeneratorConfig), "default")
    counts = dict(synthetic.PRESETS[args.preset])
    settings.layer(counts, f"preset:{args.preset}")
    settings.layer({k: v for k, v in file_cfg.items() if k in _GEN_FIELDS or k in synthetic.BEHAVIORS},
                   "config")
    settings.layer({"seed": args.seed}, "flag")
    counts = {b: settings.values[b] for b in synthetic.BEHAVIORS if b in settings.values}
    gen_vals = settings.pick(_GEN_FIELDS)
    _check_types(gen_vals, synthetic.GeneratorConfig)
    cfg = _build(synthetic.GeneratorConfig, {**gen_vals, "counts": counts}, "generator")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo("generate", settings, out)
    data = synthetic.generate_synthetic(cfg, args.seed)
    data.write(out)
    man = data.manifest()
    print(json.dumps({"num_scenes": man["num_scenes"], "counts": man["counts"], "ns_fraction": man["ns_fraction"],
                      "manifest_sha256": synthetic.manifest_hash(out)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = read_config(args.config)
    settings = Settings()
    settings.layer(_defaults(SceneConfig, training.TrainConfig, network.ModelConfig), "default")
    settings.layer({"val_fraction": 0.2}, "default")
    settings.layer(training.TrainConfig.preset(args.preset).to_dict(), f"preset:{args.preset}")
    wanted = _SCENE_FIELDS | _TRAIN_FIELDS | _MODEL_FIELDS | _RUN_FIELDS
    settings.layer({k: v for k, v in file_cfg.items() if k in wanted}, "config")
    flags = {"seed": args.seed}
    if args.no_lanes:
        flags["use_lanes"] = False
    if args.no_interaction:
        flags["use_interaction"] = False
    if args.epochs_phase1 is not None:
        flags["epochs_phase1"] = args.epochs_phase1
    if args.epochs_phase2 is not None:
        flags["epochs_phase2"] = args.epochs_phase2
    settings.layer(flags, "flag")
    for k in ("obs_len", "horizon"):
        settings.values.pop(k, None)
        settings.source.pop(k, None)

    scene_cfg = _scene_config(settings)
    model_cfg = _model_config(settings, scene_cfg)
    tvals = settings.pick(_TRAIN_FIELDS)
    _check_types(tvals, training.TrainConfig)
    train_cfg = _build(training.TrainConfig, tvals, "training")
    frac = settings.values["val_fraction"]
    if not (isinstance(frac, (int, float)) and 0.0 <= frac < 1.0):
        raise ConfigError(f"val_fraction must lie in [0, 1), got {frac!r}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo("train", settings, out)
    seq, map_path = _data_paths(Path(args.data))
    scenes = load_dataset(seq, map_path, scene_cfg)
    if not scenes:
        raise DataError(f"no scenes found under {seq}")
    if frac > 0:
        trn, val = split(scenes, (1.0 - frac, frac), train_cfg.seed)
    else:
        trn, val = list(scenes), []

    def report(rec):
        print(json.dumps(rec, sort_keys=True), flush=True)

    result = training.train(trn, val, model_cfg, train_cfg, out, resume=args.resume, on_epoch=report)
    last = result.history[-1] if result.history else {}
    if last and not np.isfinite(last["train_total"]):
        raise NumericError("training diverged: non-finite loss")
    print(json.dumps({"best_epoch": result.best_epoch, "checkpoint": str(out / training.BEST_NAME)}))
    return EXIT_OK


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise UsageError("--k values must be positive integers")
    return ks


def cmd_eval(args) -> int:
    if args.checkpoint is None and args.baseline != "cv":
        raise UsageError("eval needs --checkpoint or --baseline cv")
    file_cfg = read_config(args.config)
    settings = Settings()
    settings.layer(_defaults(SceneConfig), "default")
    settings.layer({k: v for k, v in file_cfg.items() if k in _SCENE_FIELDS}, "config")
    settings.layer({"seed": args.seed, "k": args.k, "subset": args.subset, "split": args.split,
                    "val_fraction": args.val_fraction, "baseline": args.baseline,
                    "checkpoint": args.checkpoint}, "flag")
    ks = _parse_ks(args.k)
    scene_cfg = _scene_config(settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo("eval", settings, out)

    ckpt = None
    if args.checkpoint is not None:
        ckpt = training.load_checkpoint(args.checkpoint)
    seq, map_path = _data_paths(Path(args.data))
    graph = LaneGraph.load(map_path)
    scenes = load_dataset(seq, map_path, scene_cfg)
    if args.split != "all":
        split_seed = ckpt.train_config.seed if ckpt is not None and ckpt.train_config else args.seed
        trn, val = split(scenes, (1.0 - args.val_fraction, args.val_fraction), split_seed)
        scenes = val if args.split == "val" else trn
    if args.subset == "ns":
        scenes = [s for s in scenes if s.ns_flag]
    if not scenes:
        raise DataError("no scenes left to evaluate")
    subsets = ("ns",) if args.subset == "ns" else ("full", "ns")

    reports = {}
    if ckpt is not None:
        cfg = ckpt.model_config
        if (cfg.obs_len, cfg.horizon) != (scene_cfg.obs_len, scene_cfg.fut_len):
            raise CheckpointError("checkpoint window lengths differ from the data settings")
        reports["model"] = metrics.evaluate(metrics.ModelPredictor(ckpt.params, cfg, args.seed), scenes, graph,
                                            ks, args.seed, subsets)
    # the constant-velocity block is always there for comparison
    reports["baseline_cv"] = metrics.evaluate(metrics.ConstantVelocityPredictor(), scenes, graph, ks, args.seed,
                                              subsets)
    for rep in reports.values():
        for by_k in rep.blocks.values():
            for blk in by_k.values():
                if blk.ade is not None and not np.isfinite(blk.ade):
                    raise NumericError("evaluation produced non-finite errors")
    _write_json(out / "report.json", {name: rep.to_dict() for name, rep in reports.items()})
    text = "\n".join(rep.to_text() for rep in reports.values())
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    file_cfg = read_config(args.config)
    settings = Settings()
    settings.layer(_defaults(SceneConfig), "default")
    settings.layer({k: v for k, v in file_cfg.items() if k in _SCENE_FIELDS}, "config")
    settings.layer({"seed": args.seed, "k": args.k, "checkpoint": args.checkpoint, "scene": args.scene}, "flag")
    scene_cfg = _scene_config(settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo("predict", settings, out)

    ckpt = training.load_checkpoint(args.checkpoint)
    scene_path = Path(args.scene)
    map_path = Path(args.map) if args.map else next(
        (p for p in (scene_path.parent / "map.json", scene_path.parent.parent / "map.json") if p.exists()), None)
    if map_path is None:
        raise DataError("no map found; pass --map")
    graph = LaneGraph.load(map_path)
    scenes = scenes_from_sequence(scene_path.stem, read_sequence_csv(scene_path), graph, scene_cfg)
    if not scenes:
        raise DataError(f"{scene_path}: no usable AGENT track")
    scene = scenes[0]
    hyps = network.predict_multimodal(scene, ckpt.params, ckpt.model_config, args.k, args.seed)
    doc = {
        "scene_id": scene.scene_id,
        "K": args.k,
        "seed": args.seed,
        "hypotheses": [
            {
                "rank": i,
                "probability": h.probability,
                "source_lane": h.lane_id,
                "sampled": h.sampled,
                "trajectory": h.mu.tolist(),
                "sigma": h.sigma.tolist(),
                "rho": h.rho.tolist(),
            }
            for i, h in enumerate(hyps)
        ],
    }
    _write_json(out / "predictions.json", doc)
    if args.plot:
        (out / f"{scene.scene_id}.svg").write_text(plot.scene_svg(scene, hyps))
    print(json.dumps({"scene_id": scene.scene_id, "probabilities": [h.probability for h in hyps]}))
    return EXIT_OK


# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="laneattn",
                     description="Lane-attention trajectory prediction on CSV + map JSON driving data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
        p.add_argument("--config", help="flat JSON settings file")
        p.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--preset", choices=sorted(synthetic.PRESETS), default="tiny")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory (sequences/ and map.json)")
    t.add_argument("--preset", choices=sorted(training.TRAIN_PRESETS), default="desk")
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    t.add_argument("--no-lanes", action="store_true", help="drop the lane branch")
    t.add_argument("--no-interaction", action="store_true", help="drop the interaction branch")
    t.add_argument("--epochs-phase1", type=int)
    t.add_argument("--epochs-phase2", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or the constant-velocity baseline")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--k", default="1,3,6", help="comma-separated K values")
    e.add_argument("--subset", choices=("all", "ns"), default="all")
    e.add_argument("--baseline", choices=("cv",), help="evaluate constant velocity alone when no checkpoint is given")
    e.add_argument("--split", choices=("all", "train", "val"), default="all")
    e.add_argument("--val-fraction", type=float, default=0.2)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one scene file")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="sequence CSV")
    p.add_argument("--map", help="map JSON (default: next to the scene file)")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--plot", action="store_true", help="also write an SVG drawing")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"laneattn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"laneattn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, LaneAttnError, OSError) as exc:
        print(f"laneattn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
