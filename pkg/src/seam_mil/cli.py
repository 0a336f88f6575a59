"""``seam-mil`` command line: synth-data, train, eval, export-cam, gradcheck.

Every ``TrainConfig`` and ``SynthConfig`` field has a flag. Values are merged
as dataclass defaults < ``--config`` file < explicit flags. The config file is
either JSON (an object, optionally keyed by command name) or flat
``key = value`` lines; keys may use ``-`` or ``_``.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import (
    ArrayDataset,
    FundusDataset,
    SynthConfig,
    _to_float,
    generate_synthetic,
    load_image,
    load_image_folder,
    load_index,
    preprocess,
    save_image_folder,
)
from .equivariance import AffineSpec
from .errors import ConfigError, SeamMilError
from .evaluation import evaluate, export_heatmap, upsample_cam
from .gradcheck import run_suite
from .siamese import BackboneSpec, forward_siamese
from .trainer import TrainConfig, fit, load_checkpoint

DATA_ROOT_ENV = "SEAM_MIL_DATA_ROOT"
TEST_SEED_OFFSET = 1000

log = logging.getLogger("seam_mil")


# --------------------------------------------------------------------------- config plumbing


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_tuple(text, cast):
    if isinstance(text, (list, tuple)):
        return tuple(cast(v) for v in text)
    return tuple(cast(v) for v in str(text).replace("(", "").replace(")", "").split(",") if v.strip())


def _parse_optional(kind):
    def convert(text):
        if text is None or str(text).strip().lower() in ("", "none", "null"):
            return None
        return kind(text)

    return convert


# field name -> converter from a string (or JSON value) to the dataclass value
_TRAIN_CONVERTERS = {
    "base_lr": float,
    "lr_multiplier_new_params": float,
    "decay_power": float,
    "weight_decay": float,
    "momentum": float,
    "batch_size": int,
    "epochs": int,
    "affine": lambda v: AffineSpec.from_dict(v) if isinstance(v, dict) else AffineSpec.parse(str(v)),
    "seed": int,
    "loss_weights": lambda v: _parse_tuple(v, float),
    "variant": str,
    "refine": _parse_bool,
    "include_background": _parse_bool,
    "stop_refined_grad": _parse_bool,
    "augment": _parse_bool,
    "consistency_warmup_epochs": float,
    "grad_clip_norm": _parse_optional(float),
    "backbone": str,
    "backbone_channels": int,
    "embed_dim": _parse_optional(int),
    "mil_channels": int,
    "attention_dim": int,
}
_SYNTH_CONVERTERS = {
    "n_images": int,
    "image_size": int,
    "lesion_count_range": lambda v: _parse_tuple(v, int),
    "lesion_radius_range": lambda v: _parse_tuple(v, float),
    "lesion_contrast_range": lambda v: _parse_tuple(v, float),
    "background_texture": str,
    "positive_fraction": float,
    "seed": int,
    "optic_disc": _parse_bool,
}
_BOOL_FIELDS = {"refine", "include_background", "stop_refined_grad", "augment", "optic_disc"}

_TRAIN_HELP = {
    "base_lr": "backbone learning rate at step 0",
    "lr_multiplier_new_params": "LR multiplier for the newly added heads",
    "decay_power": "exponent of the polynomial LR decay",
    "affine": "affine branch transform, e.g. rescale:0.4, hflip, rotate:90",
    "loss_weights": "weights of multi-label, ER, ECR and MIL cross-entropy terms",
    "variant": "full | mil | backbone",
    "consistency_warmup_epochs": "epochs over which ER/ECR weights ramp linearly from 0",
    "grad_clip_norm": "clip the global gradient norm to this value (default: off)",
    "backbone": "toy_cnn | resnet38_like",
    "backbone_channels": "backbone output channels",
    "embed_dim": "correlation embedding width (default: channels // 4)",
}


def read_config_file(path: Optional[str], command: str) -> dict:
    """Flat or structured config as ``{field_name: raw value}``."""
    if not path:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if isinstance(data.get(command), dict):
            data = data[command]
    else:
        data = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line or (line.startswith("[") and line.endswith("]")):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            data[key.strip()] = value.strip()
    return {k.replace("-", "_"): v for k, v in data.items()}


def _merge(defaults: dict, file_values: dict, flag_values: dict, converters: dict) -> dict:
    merged = dict(defaults)
    for source in (file_values, flag_values):
        for key, raw in source.items():
            if key not in converters:
                raise ConfigError(f"unknown option {key!r}")
            try:
                merged[key] = converters[key](raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    return merged


def _explicit(args: argparse.Namespace, names) -> dict:
    """Options the user actually passed (unset flags default to ``None``)."""
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _add_field_flags(parser, converters: dict, helps: dict):
    for name in converters:
        flag = "--" + name.replace("_", "-")
        if name in _BOOL_FIELDS:
            parser.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, help=helps.get(name))
        else:
            parser.add_argument(flag, default=None, metavar=name.upper(), help=helps.get(name))


def train_config_from(args: argparse.Namespace) -> TrainConfig:
    defaults = {f.name: f.default if f.default is not MISSING else f.default_factory() for f in fields(TrainConfig)}
    defaults["backbone_channels"] = defaults["backbone"].out_channels
    defaults["backbone"] = defaults["backbone"].kind
    merged = _merge(defaults, read_config_file(args.config, "train"), _explicit(args, _TRAIN_CONVERTERS), _TRAIN_CONVERTERS)
    merged["backbone"] = BackboneSpec(merged.pop("backbone"), merged.pop("backbone_channels"))
    return TrainConfig(**merged)


def synth_config_from(args: argparse.Namespace) -> SynthConfig:
    defaults = {f.name: f.default for f in fields(SynthConfig)}
    merged = _merge(defaults, read_config_file(args.config, "synth-data"), _explicit(args, _SYNTH_CONVERTERS), _SYNTH_CONVERTERS)
    return SynthConfig(**merged)


def _data_root(arg: Optional[str]) -> Path:
    root = arg or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset given: pass --data or set {DATA_ROOT_ENV}")
    return Path(root)


def _load_split(root: Path, split: str, labels_csv: Optional[str] = None, image_size: int = 512):
    """``root/split`` image folder, ``root`` itself, or a graded label CSV filtered to ``split``."""
    if labels_csv:
        records = [r for r in load_index(labels_csv, root, split_map=None) if r.split == split]
        if not records:
            raise ConfigError(f"no records in split {split!r}")
        return FundusDataset(records, image_size)
    if (root / split / "index.csv").exists():
        return load_image_folder(root / split)
    if (root / "index.csv").exists():
        return load_image_folder(root)
    raise ConfigError(f"no dataset index under {root} (looked for {split}/index.csv and index.csv)")


# --------------------------------------------------------------------------- commands


def cmd_synth_data(args) -> int:
    cfg = synth_config_from(args)
    out = Path(args.out or _data_root(None))
    train = generate_synthetic(cfg)
    save_image_folder(train, out / "train")
    n_test = int(args.n_test)
    if n_test > 0:
        test_cfg = SynthConfig(**{**cfg.__dict__, "n_images": n_test, "seed": cfg.seed + TEST_SEED_OFFSET})
        save_image_folder(generate_synthetic(test_cfg), out / "test")
    print(json.dumps({"out": str(out), "train": len(train), "test": n_test}))
    return 0


def cmd_train(args) -> int:
    cfg = train_config_from(args)
    root = _data_root(args.data)
    train = _load_split(root, "train", args.labels_csv, args.image_size)
    val = None
    if args.val_split:
        val = _load_split(root, args.val_split, args.labels_csv, args.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    fit(train, cfg, out, val_set=val, threshold=args.threshold)
    sys.stdout.write((out / "metrics.json").read_text())
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = _load_split(_data_root(args.data), args.split, args.labels_csv, args.image_size)
    report = evaluate(state.model, dataset, state.cfg.affine, args.threshold, split=args.split)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.split}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    sys.stdout.write(text)
    return 0


def _expand_images(patterns: Sequence[str]) -> list[Path]:
    paths = []
    for pattern in patterns:
        hits = sorted(glob.glob(pattern)) if glob.has_magic(pattern) else [pattern]
        paths.extend(Path(h) for h in hits)
    if not paths:
        raise ConfigError(f"no images match {list(patterns)}")
    return paths


def cmd_export_cam(args) -> int:
    state = load_checkpoint(args.checkpoint)
    model, spec = state.model.eval(), state.cfg.affine
    out_dir = Path(args.out_dir)
    written = []
    for path in _expand_images(args.images):
        img = _to_float(load_image(path))
        if args.image_size:
            img = preprocess(img, args.image_size)
        x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()
        with torch.no_grad():
            out = forward_siamese(model, x, spec)
        cam = out.cam_rm_orig if args.which == "refined" else out.cam_orig
        cam = upsample_cam(cam, tuple(x.shape[-2:]))[0]
        target = out_dir / f"{path.stem}_{args.which}.png"
        export_heatmap(cam, img, target)
        written.append(str(target))
        if args.attention and out.attention is not None:
            att = out.attention[0].reshape(out.f_orig.shape[-2:]).numpy()
            np.save(out_dir / f"{path.stem}_attention.npy", att)
    print(json.dumps({"written": written}))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:32s} max rel err {r.max_rel_error:.3e}")
    return 0 if all(r.passed for r in results) else 1


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seam-mil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic train/test image folder")
    p.add_argument("--config")
    p.add_argument("--out", help=f"output root (default ${DATA_ROOT_ENV})")
    p.add_argument("--n-test", default=100, type=int, help="held-out images, generated with seed + 1000")
    _add_field_flags(p, _SYNTH_CONVERTERS, {})
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model and write checkpoints plus metrics")
    p.add_argument("--config")
    p.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")
    p.add_argument("--labels-csv", help="graded label CSV for a folder of fundus photographs")
    p.add_argument("--image-size", type=int, default=512, help="preprocessing size for fundus photographs")
    p.add_argument("--val-split", default=None, help="split evaluated into metrics.json (default: train)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="run directory")
    _add_field_flags(p, _TRAIN_CONVERTERS, _TRAIN_HELP)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--labels-csv")
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="report path (default eval_<split>.json next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-cam", help="write CAM heatmap overlays for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True, help="image paths or glob patterns")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--which", choices=("original", "refined"), default="refined")
    p.add_argument("--image-size", type=int, default=0, help="center-crop and resize first (0 keeps the image)")
    p.add_argument("--attention", action="store_true", help="also save MIL attention maps as .npy")
    p.set_defaults(func=cmd_export_cam)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SeamMilError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
