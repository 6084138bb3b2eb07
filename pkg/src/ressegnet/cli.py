"""Command-line entry point.

Subcommands: rasterize, synth, split, train, eval, dump-levels.  Every
subcommand accepts --config pointing at a JSON file whose keys are the
underscored flag names; explicit command-line flags override file values.
Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .backbone import ConfigurationError, NetworkConfig
from .data import DatasetSplit, SynthConfig, split_dataset
from .geometry import InvalidAnnotationError, PolygonAnnotation, rasterize_polygons
from .loss import binarize  # noqa: F401  (re-exported for scripting convenience)
from .resseg import MODEL_KINDS, load_model, supervised_maps
from .train import TrainConfig, evaluate, image_to_tensor, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """Resolve option values: explicit flag > config file > default."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        for key, value in doc.items():
            if key not in merged and key != "network":
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = value
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def build_parser() -> _Parser:
    parser = _Parser(prog="ressegnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="convert a polygon annotation JSON to a mask PNG")
    p.add_argument("--config")
    p.add_argument("--annotations", help="annotation JSON ({'polygons': [[[x,y],...],...]})")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--out", help="output mask PNG (foreground 255)")

    p = sub.add_parser("synth", help="generate a synthetic dataset with manifest")
    p.add_argument("--config")
    p.add_argument("--count", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--ellipse-min", type=int, dest="ellipse_min")
    p.add_argument("--ellipse-max", type=int, dest="ellipse_max")
    p.add_argument("--radius-min", type=float, dest="radius_min")
    p.add_argument("--radius-max", type=float, dest="radius_max")
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("split", help="deterministic train/validation/test split")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--ratios", help="colon-separated, e.g. 8:1:1")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a model and keep the best-validation epoch")
    p.add_argument("--config", help="JSON with TrainConfig keys (incl. 'network')")
    p.add_argument("--manifest")
    p.add_argument("--split", help="split JSON from the split subcommand")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--patches-per-image", type=int, dest="patches_per_image")
    p.add_argument("--eval-threshold", type=float, dest="eval_threshold")
    p.add_argument("--weights", help="comma-separated per-level loss weights")
    p.add_argument("--input-size", type=int, dest="input_size")
    p.add_argument("--levels", type=int)
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--input-channels", type=int, dest="input_channels")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset subset")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--subset", choices=("train", "validation", "test"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")

    p = sub.add_parser("dump-levels", help="write every supervised prob-map as a PNG panel")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="input image PNG")
    p.add_argument("--out-dir", dest="out_dir")
    return parser


def _require(merged: dict, *keys):
    missing = [k for k in keys if merged.get(k) is None]
    if missing:
        raise UsageError("missing required options: " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def cmd_rasterize(args) -> int:
    opts = _merge(args, {"annotations": None, "width": None, "height": None, "out": None})
    _require(opts, "annotations", "width", "height", "out")
    ann = PolygonAnnotation.load(opts["annotations"])
    mask = rasterize_polygons(ann, opts["width"], opts["height"])
    data_mod.save_mask_png(opts["out"], mask)
    print(f"wrote {opts['out']} ({int(mask.sum())} foreground px)")
    return 0


def cmd_synth(args) -> int:
    opts = _merge(args, {
        "count": 250, "image_size": 128, "ellipse_min": 3, "ellipse_max": 8,
        "radius_min": 8.0, "radius_max": 24.0, "noise": 0.05, "seed": 0, "out_dir": None,
    })
    _require(opts, "out_dir")
    cfg = SynthConfig(
        count=opts["count"], image_size=opts["image_size"],
        ellipse_count_range=(opts["ellipse_min"], opts["ellipse_max"]),
        radius_range=(opts["radius_min"], opts["radius_max"]),
        noise_stddev=opts["noise"], seed=opts["seed"],
    )
    subs = data_mod.generate_synthetic(cfg)
    manifest = data_mod.write_dataset(subs, opts["out_dir"])
    print(f"wrote {len(subs)} images under {opts['out_dir']} (manifest {manifest})")
    return 0


def cmd_split(args) -> int:
    opts = _merge(args, {"manifest": None, "ratios": "8:1:1", "seed": 0, "out": None})
    _require(opts, "manifest", "out")
    parts = str(opts["ratios"]).split(":")
    if len(parts) != 3:
        raise ValueError(f"ratios must look like 8:1:1, got {opts['ratios']!r}")
    ratios = tuple(int(p) for p in parts)
    ids = [item["id"] for item in data_mod.load_manifest(opts["manifest"])]
    split = split_dataset(ids, ratios, opts["seed"])
    split.save(opts["out"])
    print(f"wrote {opts['out']}: {len(split.train)}/{len(split.validation)}/{len(split.test)} ids")
    return 0


def cmd_train(args) -> int:
    defaults = {
        "manifest": None, "split": None, "out_dir": None,
        "model": None, "epochs": None, "batch_size": 4, "learning_rate": 1e-4,
        "seed": 0, "patches_per_image": 4, "eval_threshold": 0.5, "weights": None,
        "input_size": None, "levels": 5, "base_channels": 32, "input_channels": 3,
    }
    opts = _merge(args, defaults)
    # a config file may carry the network block in TrainConfig form
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        for key, value in doc.get("network", {}).items():
            if getattr(args, key, None) is None:
                opts[key] = value
    _require(opts, "manifest", "split", "out_dir", "model", "epochs", "input_size")
    weights = opts["weights"]
    if isinstance(weights, str):
        weights = [float(w) for w in weights.split(",")]
    network = NetworkConfig(
        input_size=opts["input_size"], levels=opts["levels"],
        base_channels=opts["base_channels"], input_channels=opts["input_channels"],
    )
    cfg = TrainConfig(
        model=opts["model"], network=network, epochs=opts["epochs"],
        batch_size=opts["batch_size"], learning_rate=opts["learning_rate"],
        seed=opts["seed"], patches_per_image=opts["patches_per_image"],
        weights=weights, eval_threshold=opts["eval_threshold"],
    )
    split = DatasetSplit.load(opts["split"])
    train_images = data_mod.load_subimages(opts["manifest"], split.train)
    val_images = data_mod.load_subimages(opts["manifest"], split.validation)

    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model, history = train(cfg, train_images, val_images,
                           checkpoint_path=out_dir / "checkpoint.npz", log=print)
    history.save(out_dir / "history.json")
    (out_dir / "train_config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    print(f"best epoch {history.best_epoch} "
          f"(val_dsc {history.per_epoch[history.best_epoch - 1]['val_mean_dsc']:.4f}); "
          f"wrote {out_dir}/checkpoint.npz")
    return 0


def cmd_eval(args) -> int:
    opts = _merge(args, {"checkpoint": None, "manifest": None, "split": None,
                         "subset": "test", "threshold": 0.5, "out": None})
    _require(opts, "checkpoint", "manifest", "split", "out")
    model = load_model(opts["checkpoint"])
    split = DatasetSplit.load(opts["split"])
    ids = getattr(split, opts["subset"])
    images = data_mod.load_subimages(opts["manifest"], ids)
    report = evaluate(model, images, opts["threshold"])
    Path(opts["out"]).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(f"{opts['subset']} mean DSC {report['mean_dsc']:.4f} over {len(ids)} images")
    return 0


def cmd_dump_levels(args) -> int:
    opts = _merge(args, {"checkpoint": None, "image": None, "out_dir": None})
    _require(opts, "checkpoint", "image", "out_dir")
    model = load_model(opts["checkpoint"])
    image = data_mod.load_image_png(opts["image"])
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    import torch
    model.eval()
    with torch.no_grad():
        maps = supervised_maps(model, image_to_tensor(image)[None])
    arrays = [np.rint(m[0, 0].numpy() * 255.0).astype(np.uint8) for m in maps]
    for k, arr in enumerate(arrays):
        from PIL import Image
        Image.fromarray(arr, mode="L").save(out_dir / f"level_{k}.png")
    panel = np.hstack([_nearest_upscale(a, arrays[-1].shape[0]) for a in arrays])
    from PIL import Image
    Image.fromarray(panel, mode="L").save(out_dir / "panel.png")
    print(f"wrote {len(arrays)} level maps and panel.png to {out_dir}")
    return 0


def _nearest_upscale(arr: np.ndarray, size: int) -> np.ndarray:
    factor = size // arr.shape[0]
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


_COMMANDS = {
    "rasterize": cmd_rasterize,
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "dump-levels": cmd_dump_levels,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (InvalidAnnotationError, ConfigurationError, ValueError, KeyError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures, including I/O on outputs
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
