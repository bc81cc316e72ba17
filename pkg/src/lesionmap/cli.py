"""Command-line surface: synth, stats, preprocess, train, eval, explain.

Every subcommand accepts `--config FILE` holding `key = value` lines whose
keys are the flag names; explicit flags win over the file. The fully
resolved configuration is echoed to stdout so any run can be reproduced by
feeding those lines back in. Output files are written atomically.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation, gradcam, training
from .dataset import (
    CLASS_NAMES,
    class_distribution,
    load_labeled_dataset,
    synth_generate,
)
from .errors import LesionmapError
from .image_io import atomic_write_bytes, read_image, write_image
from .imaging import clahe, intensity_histogram, normalize, resize_bilinear
from .model import (
    ModelConfig,
    build_model,
    load_weights,
    parse_model_config,
    save_weights,
)

_IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (converter for config-file strings, default, required)
_COMMAND_KEYS: dict[str, dict[str, tuple]] = {
    "synth": {
        "out": (str, None, True),
        "count": (int, None, True),
        "classes": (int, 5, False),
        "size": (int, 64, False),
        "seed": (int, 0, False),
    },
    "stats": {
        "labels": (str, None, True),
        "images": (str, None, False),
    },
    "preprocess": {
        "in_dir": (str, None, True),
        "out": (str, None, True),
        "clahe": (_parse_bool, False, False),
        "tiles": (int, 8, False),
        "clip": (float, 2.0, False),
        "resize": (int, None, False),
        "hist_csv": (str, None, False),
    },
    "train": {
        "images": (str, None, True),
        "labels": (str, None, True),
        "out": (str, None, True),
        "model_config": (str, None, False),
        "epochs": (int, 15, False),
        "seed": (int, 0, False),
        "lr": (float, 0.01, False),
        "batch_size": (int, 16, False),
        "momentum": (float, 0.9, False),
        "augment": (_parse_bool, True, False),
        "norm_mean": (float, 0.5, False),
        "norm_std": (float, 0.5, False),
        "log": (str, None, False),
    },
    "eval": {
        "images": (str, None, True),
        "labels": (str, None, True),
        "weights": (str, None, True),
        "report": (str, None, True),
        "model_config": (str, None, False),
        "norm_mean": (float, 0.5, False),
        "norm_std": (float, 0.5, False),
    },
    "explain": {
        "image": (str, None, True),
        "weights": (str, None, True),
        "out": (str, None, True),
        "class_index": (int, None, False),
        "blend": (float, 0.4, False),
        "model_config": (str, None, False),
        "norm_mean": (float, 0.5, False),
        "norm_std": (float, 0.5, False),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionmap",
        description="Retinopathy pipeline: synthesize data, preprocess, train, evaluate, explain.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file supplying flag defaults")
        return p

    p = add("synth", "generate a synthetic lesion dataset with ground-truth boxes")
    p.add_argument("--out", help="output directory")
    p.add_argument("--count", type=int, help="number of images")
    p.add_argument("--classes", type=int, help="number of classes (default 5)")
    p.add_argument("--size", type=int, help="square image size (default 64)")
    p.add_argument("--seed", type=int)

    p = add("stats", "print the class distribution of a labels CSV")
    p.add_argument("--labels", help="labels CSV (id,label)")
    p.add_argument("--images", help="image directory (default: alongside the CSV)")

    p = add("preprocess", "apply CLAHE and/or resizing to a directory of images")
    p.add_argument("--in", dest="in_dir", help="input directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--clahe", action="store_true", default=None, help="apply CLAHE")
    p.add_argument("--tiles", type=int, help="CLAHE tile grid (NxN, default 8)")
    p.add_argument("--clip", type=float, help="CLAHE clip factor (default 2.0)")
    p.add_argument("--resize", type=int, help="resize to NxN")
    p.add_argument("--hist-csv", dest="hist_csv", help="write before/after intensity histograms")

    p = add("train", "train the CNN on a labeled image directory")
    p.add_argument("--images", help="image directory")
    p.add_argument("--labels", help="labels CSV (id,label)")
    p.add_argument("--model-config", dest="model_config", help="model config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    p.add_argument("--norm-mean", dest="norm_mean", type=float)
    p.add_argument("--norm-std", dest="norm_std", type=float)
    p.add_argument("--log", help="epoch log CSV path (default: <out>.csv)")
    p.add_argument("--out", help="weight file to write")

    p = add("eval", "evaluate weights on a labeled image directory")
    p.add_argument("--images", help="image directory")
    p.add_argument("--labels", help="labels CSV (id,label)")
    p.add_argument("--weights", help="weight file")
    p.add_argument("--report", help="report CSV to write")
    p.add_argument("--model-config", dest="model_config", help="model config file")
    p.add_argument("--norm-mean", dest="norm_mean", type=float)
    p.add_argument("--norm-std", dest="norm_std", type=float)

    p = add("explain", "write a class-activation overlay for one image")
    p.add_argument("--image", help="input image")
    p.add_argument("--weights", help="weight file")
    p.add_argument("--class", dest="class_index", type=int, help="class to explain (default: argmax)")
    p.add_argument("--blend", type=float, help="overlay blend in [0,1] (default 0.4)")
    p.add_argument("--model-config", dest="model_config", help="model config file")
    p.add_argument("--norm-mean", dest="norm_mean", type=float)
    p.add_argument("--norm-std", dest="norm_std", type=float)
    p.add_argument("--out", help="overlay path, or a directory/ for the three-panel files")
    return parser


def _parse_kv_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge flags over config-file values over built-in defaults."""
    spec = _COMMAND_KEYS[args.command]
    file_values = _parse_kv_file(args.config) if args.config else {}
    unknown = set(file_values) - set(spec)
    if unknown:
        raise ValueError(f"{args.config}: unknown keys for {args.command}: {sorted(unknown)}")
    resolved = {}
    for key, (convert, default, required) in spec.items():
        value = getattr(args, key)
        if value is None and key in file_values:
            value = convert(file_values[key])
        if value is None:
            value = default
        if value is None and required:
            parser.error(f"{args.command}: missing required setting --{key.replace('_', '-')}")
        resolved[key] = value
    return resolved


def _print_resolved(command: str, resolved: dict) -> None:
    print(f"# resolved config: {command}")
    for key in sorted(resolved):
        value = resolved[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        print(f"{key} = {value}")


def _worker_count() -> int:
    limit = min(os.cpu_count() or 1, 8)
    cap = os.environ.get("LESIONMAP_THREADS")
    if cap:
        limit = min(limit, max(1, int(cap)))
    return max(1, limit)


def _class_names(k: int) -> list[str]:
    return list(CLASS_NAMES) if k == len(CLASS_NAMES) else [f"class_{c}" for c in range(k)]


def _load_model(cfg: dict):
    config = parse_model_config(cfg["model_config"]) if cfg.get("model_config") else None
    return load_weights(cfg["weights"], config)


def _prepare_input(img, model, cfg: dict):
    size = model.config.input_size
    if (img.height, img.width) != (size, size):
        img = resize_bilinear(img, size, size)
    return img, normalize(img, cfg["norm_mean"], cfg["norm_std"])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(cfg: dict) -> int:
    records = synth_generate(
        cfg["out"], cfg["count"], num_classes=cfg["classes"], image_size=cfg["size"], seed=cfg["seed"]
    )
    print(f"wrote {len(records)} images, labels.csv, and boxes.csv under {cfg['out']}")
    return 0


def _cmd_stats(cfg: dict) -> int:
    labels_csv = Path(cfg["labels"])
    image_dir = Path(cfg["images"]) if cfg["images"] else labels_csv.parent
    records = load_labeled_dataset(image_dir, labels_csv)
    dist = class_distribution(records)
    names = _class_names(len(dist.counts))
    print(f"{'class':<6}{'name':<16}{'count':>8}  fraction")
    for c, (count, frac) in enumerate(zip(dist.counts, dist.fractions)):
        print(f"{c:<6}{names[c]:<16}{count:>8}  {frac:.3f}")
    print(f"total {dist.total}")
    return 0


def _cmd_preprocess(cfg: dict) -> int:
    in_dir, out_dir = Path(cfg["in_dir"]), Path(cfg["out"])
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)

    def process(path: Path):
        img = read_image(path)
        before = intensity_histogram(img).bins
        if cfg["clahe"]:
            img = clahe(img, tiles=(cfg["tiles"], cfg["tiles"]), clip_factor=cfg["clip"])
        if cfg["resize"]:
            img = resize_bilinear(img, cfg["resize"], cfg["resize"])
        after = intensity_histogram(img).bins
        write_image(out_dir / path.name, img)
        return before, after

    before_total = np.zeros(256, dtype=np.int64)
    after_total = np.zeros(256, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        for before, after in pool.map(process, paths):
            before_total += before
            after_total += after

    if cfg["hist_csv"]:
        lines = ["bin,before,after"]
        lines += [f"{b},{before_total[b]},{after_total[b]}" for b in range(256)]
        atomic_write_bytes(cfg["hist_csv"], ("\n".join(lines) + "\n").encode())
    print(f"processed {len(paths)} images into {out_dir}")
    return 0


def _cmd_train(cfg: dict) -> int:
    records = load_labeled_dataset(cfg["images"], cfg["labels"])
    model_config = (
        parse_model_config(cfg["model_config"]) if cfg["model_config"] else ModelConfig()
    )
    model = build_model(model_config, seed=cfg["seed"])

    size = model_config.input_size
    samples = []
    for rec in records:
        img = read_image(rec.path)
        if (img.height, img.width) != (size, size):
            img = resize_bilinear(img, size, size)
        samples.append((img, rec.label))

    train_config = training.TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        momentum=cfg["momentum"],
        seed=cfg["seed"],
        augment_flips=cfg["augment"],
        norm_mean=cfg["norm_mean"],
        norm_std=cfg["norm_std"],
    )
    model, log = training.train(model, samples, train_config)
    save_weights(model, cfg["out"])
    log_path = cfg["log"] if cfg["log"] else cfg["out"] + ".csv"
    training.write_epoch_log(log_path, log)
    final = log[-1]
    print(f"trained {len(samples)} samples for {len(log)} epochs "
          f"(final loss {final.mean_loss:.4f}, accuracy {final.accuracy:.4f})")
    print(f"weights: {cfg['out']}\nepoch log: {log_path}")
    return 0


def _cmd_eval(cfg: dict) -> int:
    records = load_labeled_dataset(cfg["images"], cfg["labels"])
    model = _load_model(cfg)

    def score(rec):
        _, x = _prepare_input(read_image(rec.path), model, cfg)
        return model.forward(x).scores.data

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        rows = list(pool.map(score, records))
    labels = [rec.label for rec in records]
    report = evaluation.evaluate(np.stack(rows), labels)

    names = _class_names(model.num_classes)
    run_name = Path(cfg["weights"]).stem
    atomic_write_bytes(cfg["report"], evaluation.report_csv([(run_name, report)], names).encode())
    print(evaluation.report_text([(run_name, report)], names), end="")
    print(f"report: {cfg['report']}")
    return 0


def _cmd_explain(cfg: dict) -> int:
    model = _load_model(cfg)
    original = read_image(cfg["image"])
    _, x = _prepare_input(original, model, cfg)

    scores = model.forward(x).scores.data
    predicted = int(np.argmax(scores))
    target = cfg["class_index"] if cfg["class_index"] is not None else predicted
    heatmap = gradcam.compute_heatmap(model, x, target, original.height, original.width)
    overlaid = gradcam.overlay(original, heatmap, blend=cfg["blend"])

    out = cfg["out"]
    names = _class_names(model.num_classes)
    if out.endswith(("/", os.sep)) or Path(out).is_dir():
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = Path(cfg["image"]).stem
        write_image(out_dir / f"{stem}_input.png", original)
        write_image(out_dir / f"{stem}_heatmap.png", gradcam.heatmap_to_image(heatmap))
        write_image(out_dir / f"{stem}_overlay.png", overlaid)
        print(f"wrote input/heatmap/overlay panels under {out_dir}")
    else:
        write_image(out, overlaid)
        print(f"overlay: {out}")
    print(
        f"predicted class {predicted} ({names[predicted]}), score {scores[predicted]:.4f}; "
        f"explained class {target} ({names[target]})"
    )
    return 0


_DISPATCH = {
    "synth": _cmd_synth,
    "stats": _cmd_stats,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        resolved = _resolve(args, parser)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        _print_resolved(args.command, resolved)
        return _DISPATCH[args.command](resolved)
    except (LesionmapError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
