"""Command-line pipeline: phantom generation, fixel building, training,
tracking, evaluation and gradient verification.

Every command prints its resolved configuration and the content hashes of
its inputs to stdout as JSON, and writes machine-readable errors to stderr
with a distinct exit code per failure class:

    0  success
    2  configuration/schema violation
    3  missing input file
    4  checkpoint error or checkpoint/config mismatch
    5  file format error
    1  anything else
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import evalmod, tck
from .encoder import EncoderWeights, FeatureConfig, encode_subject
from .errors import CheckpointError, ConfigError, FormatError, TractoryError
from .fixel import build_fixels, load_fixels, save_fixels
from .learn import (
    Checkpoint,
    DirectionModel,
    TrainBatch,
    build_training_set,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import PhantomDataset, PhantomSpec, generate, preset
from .rng import stream
from .tracker import (
    ACCEPTED,
    FactPredictor,
    LearnedPredictor,
    Streamline,
    TrackerConfig,
    Tractogram,
    TrackingEnvironment,
    track_whole_brain,
)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4
EXIT_FORMAT = 5

_number = {"type": "number"}
_positive = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int_pos = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "phantom": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": "string"},
                "seed": {"type": "integer"},
                "noise_sigma": _nonneg,
                "dims": {"type": "array", "items": _int_pos, "minItems": 3,
                         "maxItems": 3},
                "spacing": {"type": "array", "items": _positive, "minItems": 3,
                            "maxItems": 3},
                "bundles": {"type": "array"},
                "n_gradient_dirs": {"type": "integer", "minimum": 6},
                "bval": _positive,
                "s0": _positive,
                "gt_step_mm": _positive,
                "gt_offset_spacing_mm": _positive,
            },
        },
        "features": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "conv_channels": {"type": "array", "items": _int_pos,
                                  "minItems": 3, "maxItems": 3},
                "seg_channels": {"type": "array", "items": _int_pos,
                                 "minItems": 3, "maxItems": 3},
                "fixel_channels": {"type": "array", "items": _int_pos,
                                   "minItems": 3, "maxItems": 3},
                "include_neighborhood": {"type": "boolean"},
                "neighborhood_at_lookahead": {"type": "boolean"},
                "lookahead_voxels": _positive,
                "history_slots": {"type": "integer"},
                "fixel_features": {"enum": ["raw", "conv"]},
                "odf_encoder": {"enum": ["conv", "transformer"]},
                "patch_edge": _int_pos,
                "transformer_blocks": _int_pos,
                "transformer_units": _int_pos,
                "attention_heads": _int_pos,
                "embed_dim": _int_pos,
            },
        },
        "tracker": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "step_mm": _positive,
                "lookahead_voxels": _positive,
                "alphas": {"type": "array", "items": _positive, "minItems": 1},
                "seeds_per_voxel": _int_pos,
                "position_jitter_mm": _nonneg,
                "angle_jitter_deg": _nonneg,
                "max_length_mm": _positive,
                "max_steps": {"type": ["integer", "null"], "minimum": 1},
                "max_gm_lead_steps": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer"},
                "block_size": _int_pos,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden_layers": {"type": "array", "items": _int_pos},
                "learning_rate": _nonneg,
                "batch_size": _int_pos,
                "max_epochs": _int_pos,
                "tol": _nonneg,
                "patience": _int_pos,
                "seed": {"type": "integer"},
                "standardize": {"type": "boolean"},
                "alpha": _positive,
                "augment": {"type": "boolean"},
            },
        },
    },
}


def _load_config(path_or_none) -> dict:
    if path_or_none is None:
        doc = {}
    else:
        path = Path(path_or_none)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config rejected: {exc.message} "
                          f"(at {'/'.join(str(p) for p in exc.absolute_path)})") from exc
    return doc


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_input(path) -> str:
    path = Path(path)
    if path.is_dir():
        manifest = path / "manifest.json"
        return _sha256(manifest) if manifest.exists() else "directory"
    return _sha256(path)


def _require(path, kind: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{kind} not found: {path}")
    return path


def _announce(command: str, config: dict, inputs: dict) -> None:
    doc = {"command": command, "config": config,
           "inputs": {str(k): _hash_input(v) for k, v in inputs.items()}}
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, int(args.threads))
    env = os.environ.get("TRACTORY_THREADS")
    return max(1, int(env)) if env else 1


# -- commands --------------------------------------------------------------------


def cmd_phantom(args) -> int:
    config = _load_config(args.config)
    pcfg = dict(config.get("phantom", {}))
    if args.preset:
        pcfg.setdefault("preset", args.preset)
    if args.seed is not None:
        pcfg["seed"] = args.seed
    if "preset" in pcfg:
        name = pcfg.pop("preset")
        spec = preset(name, **pcfg)
    elif pcfg.get("bundles"):
        spec = PhantomSpec.from_dict(pcfg)
    else:
        raise ConfigError("phantom needs a preset name or an explicit bundle list")
    _announce("phantom", spec.to_dict(), {})
    dataset = generate(spec)
    dataset.save(args.out)
    print(json.dumps({"written": str(args.out),
                      "bundles": [b.name for b in dataset.bundles]}))
    return EXIT_OK


def cmd_fixel(args) -> int:
    grid_path = _require(args.grid, "grid volume")
    from .nifti import read_nifti

    grid = read_nifti(grid_path)
    streamlines = []
    for tpath in args.tracks:
        tracks, _ = tck.read_tck(_require(tpath, "track file"))
        streamlines.extend(tracks)
    cfg = {"angle_thresh_deg": args.angle_thresh, "min_support": args.min_support}
    _announce("fixel", cfg, {p: p for p in [*args.tracks, args.grid]})
    fm = build_fixels(streamlines, grid, angle_thresh_deg=args.angle_thresh,
                      min_support=args.min_support)
    save_fixels(fm, args.out)
    n = int((fm.support[..., 0] > 0).sum())
    print(json.dumps({"written": str(args.out), "voxels_with_fixels": n}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    fcfg = FeatureConfig.from_dict(config.get("features", {}))
    tcfg = dict(config.get("train", {}))
    alpha = float(tcfg.pop("alpha", 1600.0))
    augment = bool(tcfg.pop("augment", True))
    if "hidden_layers" in tcfg:
        tcfg["hidden_layers"] = tuple(tcfg["hidden_layers"])
    model = DirectionModel(**tcfg)
    seed = int(tcfg.get("seed", 0))

    datadirs = [_require(d, "dataset directory") for d in args.data]
    _announce("train", {"features": fcfg.to_dict(), "train": model.get_params(),
                        "alpha": alpha, "augment": augment},
              {d: d for d in datadirs})

    encoder_weights = EncoderWeights.create(fcfg, seed=seed)
    parts = []
    for i, d in enumerate(datadirs):
        ds = PhantomDataset.load(d)
        state = encode_subject(ds.odf, ds.labels, ds.fa, ds.fixels_true,
                               ds.keypoints, encoder_weights, fcfg)
        parts.append(build_training_set(ds, state, alpha=alpha, seed=seed + 101 * i,
                                        augment=augment))
    X = np.concatenate([b.features for b in parts])
    y = np.concatenate([b.targets for b in parts])
    kappa = np.concatenate([b.kappa for b in parts])
    model.fit(X, y, kappa)

    meta = {"datasets": {str(d): _hash_input(d) for d in datadirs},
            "alpha": alpha, "n_samples": int(len(X)),
            "final_loss": float(model.loss_curve_[-1])}
    save_checkpoint(Checkpoint(fcfg, encoder_weights, model, metadata=meta), args.out)
    curve_path = Path(args.out) / "loss_curve.csv"
    with open(curve_path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(model.loss_curve_):
            fh.write(f"{i},{v!r}\n")
    print(json.dumps({"written": str(args.out), "epochs": len(model.loss_curve_),
                      "final_loss": float(model.loss_curve_[-1])}))
    return EXIT_OK


def cmd_track(args) -> int:
    config = _load_config(args.config)
    tracker_cfg = TrackerConfig.from_dict(config.get("tracker", {}))
    if args.seed is not None:
        tracker_cfg = TrackerConfig.from_dict(
            {**tracker_cfg.to_dict(), "seed": int(args.seed)})
    datadir = _require(args.data, "dataset directory")
    ds = PhantomDataset.load(datadir)
    env = TrackingEnvironment(labels=ds.labels, fa=ds.fa)

    inputs = {"data": datadir}
    if args.algo == "fact":
        predictor = FactPredictor(ds.tensors, ds.fa)
        config_echo = {"tracker": tracker_cfg.to_dict(), "algo": "fact"}
    else:
        if not args.checkpoint:
            raise ConfigError("either --checkpoint or --algo fact is required")
        ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        if abs(ckpt.feature_config.lookahead_voxels
               - tracker_cfg.lookahead_voxels) > 1e-12:
            raise CheckpointError(
                "tracker lookahead_voxels disagrees with the checkpoint's "
                f"feature config ({tracker_cfg.lookahead_voxels} vs "
                f"{ckpt.feature_config.lookahead_voxels})")
        fixmap = load_fixels(args.fixels) if args.fixels else ds.fixels_true
        state = encode_subject(ds.odf, ds.labels, ds.fa, fixmap, ds.keypoints,
                               ckpt.encoder, ckpt.feature_config)
        predictor = LearnedPredictor(state, ckpt.model)
        inputs["checkpoint"] = Path(args.checkpoint)
        config_echo = {"tracker": tracker_cfg.to_dict(), "algo": "learned",
                       "features": ckpt.feature_config.to_dict()}
    _announce("track", config_echo, inputs)

    tractogram = track_whole_brain(env, predictor, tracker_cfg,
                                   threads=_threads(args))
    meta = {"config": json.dumps(config_echo, sort_keys=True),
            "data": _hash_input(datadir)}
    tck.write_tck(args.out, tractogram.accepted, metadata=meta)
    counts_doc = {
        "counts": tractogram.counts,
        "counts_per_alpha": {str(k): v for k, v in tractogram.counts_per_alpha.items()},
        "retention": tractogram.retention,
        "retention_per_alpha": {str(k): v
                                for k, v in tractogram.retention_per_alpha.items()},
        "config": config_echo,
    }
    Path(str(args.out) + ".counts.json").write_text(
        json.dumps(counts_doc, indent=2, sort_keys=True))
    print(json.dumps({"written": str(args.out), **tractogram.counts}))
    return EXIT_OK


def cmd_eval(args) -> int:
    tracks_path = _require(args.tracks, "track file")
    truthdir = _require(args.truth, "truth directory")
    streamlines, _ = tck.read_tck(tracks_path)
    truth = PhantomDataset.load(truthdir)
    counts_path = Path(str(tracks_path) + ".counts.json")
    config_echo = {}
    shim = Tractogram(streamlines=[
        Streamline(points=s, status=ACCEPTED, seed_index=i, repeat_index=0,
                   alpha_index=0, alpha=0.0)
        for i, s in enumerate(streamlines)])
    if counts_path.exists():
        counts_doc = json.loads(counts_path.read_text())
        config_echo = counts_doc.get("config", {})
    _announce("eval", {"pct": args.pct}, {"tracks": tracks_path, "truth": truthdir})
    report = evalmod.evaluate(shim, truth.truth_masks, truth.caps, truth.fa,
                              pct=args.pct)
    report.config_echo = config_echo
    if counts_path.exists():
        report.counts = counts_doc["counts"]
        report.retention = counts_doc["retention"]
        report.retention_per_alpha = counts_doc["retention_per_alpha"]
    doc = report.to_dict()
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(json.dumps({"written": str(args.out),
                      "dice": {k: v["dice"] for k, v in doc["per_bundle"].items()}}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        model = ckpt.model
        n_features = model.n_features_in_
        inputs = {"checkpoint": Path(args.checkpoint)}
    else:
        rng = stream(args.seed, 23)
        n_features = 32
        model = DirectionModel(hidden_layers=(16, 8), seed=args.seed,
                               standardize=False, learning_rate=0.0, max_epochs=1)
        X0 = rng.standard_normal((8, n_features))
        y0 = rng.standard_normal((8, 3))
        y0 /= np.linalg.norm(y0, axis=1, keepdims=True)
        model.fit(X0, y0)
        inputs = {}
    rng = stream(args.seed, 29)
    X = rng.standard_normal((16, n_features))
    y = rng.standard_normal((16, 3))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    kappa = rng.uniform(1.0, 100.0, 16)
    _announce("gradcheck", {"eps": args.eps, "max_weights": args.max_weights}, inputs)
    err = float(grad_check(model, TrainBatch(X, y, kappa), eps=args.eps,
                           max_weights=args.max_weights, seed=args.seed))
    ok = bool(err < 1e-4)
    print(json.dumps({"max_relative_error": err, "tolerance": 1e-4, "pass": ok}))
    return EXIT_OK if ok else EXIT_OTHER


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tractory",
                                description="learned phantom tractography pipeline")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $TRACTORY_THREADS or 1); "
                        "never changes numerical results")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate a synthetic dataset")
    sp.add_argument("--preset", help="straight | curved | crossing-90 | "
                                     "crossing-60 | branching")
    sp.add_argument("--config", help="JSON config with a 'phantom' section")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("fixel", help="build a fixel map from track files")
    sp.add_argument("--tracks", nargs="+", required=True)
    sp.add_argument("--grid", required=True, help="NIfTI volume defining the grid")
    sp.add_argument("--angle-thresh", type=float, default=30.0)
    sp.add_argument("--min-support", type=int, default=5)
    sp.add_argument("--out", required=True, help="output stem (.nii.gz + .json)")
    sp.set_defaults(func=cmd_fixel)

    sp = sub.add_parser("train", help="train the direction model")
    sp.add_argument("--data", action="append", required=True,
                    help="phantom dataset directory (repeatable)")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("track", help="compute a whole-phantom tractogram")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--algo", choices=["learned", "fact"], default="learned")
    sp.add_argument("--fixels", help="fixel-map stem overriding the dataset atlas")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=None,
                    help="override tracker.seed from the config")
    sp.add_argument("--out", required=True, help="output .tck path")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="score a tractogram against ground truth")
    sp.add_argument("--tracks", required=True)
    sp.add_argument("--truth", required=True, help="phantom dataset directory")
    sp.add_argument("--pct", type=float, default=5.0)
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="verify gradients vs finite differences")
    sp.add_argument("--checkpoint")
    sp.add_argument("--random", action="store_true",
                    help="check a random small model (default when no checkpoint)")
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--max-weights", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_MISSING)
    except CheckpointError as exc:
        return _fail(exc, EXIT_CHECKPOINT)
    except FormatError as exc:
        return _fail(exc, EXIT_FORMAT)
    except (TractoryError, ValueError, FloatingPointError) as exc:
        return _fail(exc, EXIT_OTHER)


def _fail(exc: Exception, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(doc), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
