"""Command-line entry point: ``avrank {synth,shuffle,train,predict,evaluate}``.

Config files are flat ``key = value`` documents (``#`` comments allowed).
Train accepts every :class:`~avrank.train.TrainConfig` field plus the data
keys in :data:`RUN_KEYS`; any other key is rejected. Every train run writes
the resolved config to ``<out>/config.ini``, which reproduces the run when
passed back through ``--config``.

Exit codes: 0 success, 1 validation or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint
from .dataset import (IMAGE_SUFFIXES, LoadError, _index_by_prefix, decode_color, encode_color,
                      export_avdrive, load_avdrive, synth_dataset)
from .evaluate import av_metrics, connectivity_report, emit_tables, pool_metrics
from .infer import binarize, predict_image
from .shuffle import ShuffleConfig, ShuffleError, shuffle_mask
from .train import TrainConfig, derive_seed, fit, init_state, load_generator

log = logging.getLogger("avrank")

# data-source keys accepted by ``train`` configs next to the TrainConfig fields
RUN_KEYS = {"data_root": "", "data_split": "train", "synth_n": 64, "synth_seed": 0,
            "synth_size": 128}
SECTION = "run"


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# config files

def _cast(key, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ValueError(f"config key {key}: cannot parse {raw!r}") from exc
    return raw.strip()


def read_config(path, defaults: dict) -> dict:
    """Parse a flat key/value file against ``defaults`` (which fixes keys and types)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text if text.lstrip().startswith("[") else f"[{SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ValueError(f"{path}: {exc}") from exc
    raw = {}
    for section in parser.sections():
        raw.update(parser[section])
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    return {k: _cast(k, v, defaults[k]) for k, v in raw.items()}


def write_config(values: dict, path) -> Path:
    path = Path(path)
    lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def train_defaults() -> dict:
    cfg = TrainConfig()
    return {**{f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}, **RUN_KEYS}


# --------------------------------------------------------------------------
# image I/O

def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image {path} does not exist")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc


def _read_mask(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mask {path} does not exist")
    try:
        with Image.open(path) as im:
            return decode_color(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc


def _save_png(array, path) -> Path:
    Image.fromarray(array).save(path)
    return Path(path)


def _to_uint16(p: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(p, 0, 1) * 65535).astype(np.uint16)


def overlay(image: np.ndarray, color_mask: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Blend the colour-coded mask onto an RGB image in [0,1], on lit pixels only."""
    base = np.clip(np.rint(image * 255), 0, 255).astype(np.float32)
    lit = color_mask.any(axis=-1, keepdims=True)
    out = np.where(lit, (1 - alpha) * base + alpha * color_mask.astype(np.float32), base)
    return np.rint(out).astype(np.uint8)


# --------------------------------------------------------------------------
# commands

def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    if len(dims) == 1:
        return dims * 2
    if len(dims) == 2:
        return dims
    raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")


def cmd_synth(args) -> int:
    samples = synth_dataset(args.n, seed=args.seed, size=args.size)
    paths = export_avdrive(samples, args.out, split=args.split)
    print(f"wrote {len(paths)} samples to {Path(args.out) / args.split}")
    return 0


def cmd_shuffle(args) -> int:
    mask = _read_mask(args.mask)
    mask.check()
    cfg = ShuffleConfig(seed=derive_seed(args.seed, "shuffle"))
    out_mask, report = shuffle_mask(mask, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.mask).stem
    _save_png(encode_color(out_mask), out / f"{stem}_shuffled.png")
    doc = {"source": Path(args.mask).name, "seed": args.seed, **report.to_dict()}
    (out / f"{stem}_shuffle.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"shuffled {report.final_fraction:.3f} of vessel pixels with "
          f"{len(report.ops_applied)} ops")
    return 0


def resolve_train_config(args) -> dict:
    values = train_defaults()
    if args.config:
        values.update(read_config(args.config, values))
    if args.ablation:
        values["ablation"] = args.ablation
    if args.seed is not None:
        values["seed"] = args.seed
    # validate before any output exists
    cfg = TrainConfig(**{f.name: values[f.name] for f in fields(TrainConfig)})
    values.update(asdict(cfg))
    return values


def cmd_train(args) -> int:
    values = resolve_train_config(args)
    cfg = TrainConfig(**{f.name: values[f.name] for f in fields(TrainConfig)})
    if values["data_root"]:
        samples = load_avdrive(values["data_root"], values["data_split"])
    else:
        size = (values["synth_size"],) * 2
        samples = synth_dataset(values["synth_n"], seed=values["synth_seed"], size=size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(values, out / "config.ini")
    state = fit(init_state(cfg), samples, out_dir=out, log_every=args.log_every)
    print(f"trained {state.iteration} iterations; final bce {state.history[-1]['bce']:.4f}")
    return 0


def _checkpoint_patch(path) -> int | None:
    payload = load_checkpoint(path)
    if payload["kind"] == "train_state":
        return payload["config"].get("patch")
    return payload.get("extra", {}).get("patch")


def cmd_predict(args) -> int:
    model = load_generator(args.checkpoint)
    patch = args.patch or _checkpoint_patch(args.checkpoint) or 256
    image = _read_image(args.image)
    prob = predict_image(model, image, patch=patch, stride=args.stride)
    decision = binarize(prob)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for i, name in enumerate(("artery", "vein", "vessel")):
        _save_png(_to_uint16(prob.data[i]), out / f"{stem}_{name}.png")
    color = encode_color(decision)
    _save_png(color, out / f"{stem}_av.png")
    _save_png(overlay(image, color), out / f"{stem}_overlay.png")
    print(f"wrote predictions for {stem} to {out}")
    return 0


def _ground_truth_files(gt_dir: Path) -> list[Path]:
    folder = gt_dir / "av" if (gt_dir / "av").is_dir() else gt_dir
    if not folder.is_dir():
        raise FileNotFoundError(f"ground-truth directory {gt_dir} does not exist")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise LoadError(f"no ground-truth masks in {folder}")
    return files


def _pair_prediction(gt: Path, pred_dir: Path, by_prefix: dict) -> Path:
    direct = pred_dir / f"{gt.stem}_av.png"
    if direct.is_file():
        return direct
    key = gt.name.split("_")[0]
    if key.isdigit() and int(key) in by_prefix:
        return by_prefix[int(key)]
    raise LoadError(f"no prediction in {pred_dir} pairs with {gt.name}")


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory {pred_dir} does not exist")
    by_prefix = {k: p for k, p in _index_by_prefix(pred_dir, (".png",)).items()
                 if p.name.endswith("_av.png")}
    per_image, metrics = [], []
    for gt_path in _ground_truth_files(gt_dir):
        gt = _read_mask(gt_path)
        pred = _read_mask(_pair_prediction(gt_path, pred_dir, by_prefix))
        if pred.shape != gt.shape:
            raise LoadError(f"{gt_path.name}: prediction {pred.shape} vs ground truth {gt.shape}")
        m = av_metrics(pred, gt, args.mode)
        metrics.append(m)
        per_image.append((gt_path.stem, m, connectivity_report(pred)))
    pooled = emit_tables([(args.name, pool_metrics(metrics), None)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(pooled.csv)
    out.with_name(f"{out.stem}_per_image.csv").write_text(emit_tables(per_image).csv)
    print(pooled.text, end="")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avrank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic samples in AV-DRIVE layout")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(128, 128), help="N or HxW")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("shuffle", help="perturb a colour-coded A/V mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shuffle)

    p = sub.add_parser("train", help="train a generator")
    p.add_argument("--config")
    p.add_argument("--ablation")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment a full fundus image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, help="default: the training patch size")
    p.add_argument("--stride", type=int, default=50)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--mode", choices=("gt", "seg", "gt_pixels", "segmented_pixels"),
                   default="gt")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_evaluate)
    return parser


VALIDATION_ERRORS = (ValueError, LoadError, FileNotFoundError, CheckpointError, ShuffleError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"avrank {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
