"""
localizer_ui.py

Command-line interface for the joint CAM localizer.

    gen-data      write a synthetic dataset (PNG images + manifest CSVs)
    train         train the joint model and keep the best validation epoch
    eval-cls      per-class AUC on a split
    eval-loc      per-class CAM thresholds by cross-validation + IoU accuracy
    localize      heat-map overlays and a CSV of predicted boxes
    mine-inspect  build candidate pools and audit the triplets they produce

Every command writes its effective configuration next to its outputs; the
same file can be passed back with --config to repeat the run.
"""

import argparse
import json
import logging
import os
import sys
import typing
from contextlib import contextmanager
from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from matplotlib import colormaps
from PIL import Image, ImageDraw

import activation_maps as cam
from dataset_manager import (BBox, ManifestError, Sample, SplitConfig, SplitSpec, SyntheticConfig, SyntheticConfigError,
                             carve_validation, generate_synthetic, load_manifest, read_class_names,
                             split_by_patient, stack_images, write_manifest)
from embedding_model import CheckpointError, ModelConfig, RegionPolicy, infer, load_checkpoint, predicted_classes
from evaluation import (EvalConfig, EvalReport, config_echo, emit_report, evaluate_classification,
                        evaluate_localization_cv, localization_cases, read_thresholds, select_loc_thresholds)
from mining_manager import PoolConfig, TripletMiner, pool_stats
from phash_manager import HashCache
from settings import DEFAULT_LOC_THRESHOLD, DEFAULT_OUTPUT_ROOT, configure_logging
from train_engine import TrainConfig, TrainingDivergedError, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

# Short spellings for a few config fields.
FLAG_ALIASES = {
    ("synthetic", "n_samples"): ["--n"],
    ("synthetic", "num_classes"): ["--classes"],
    ("eval", "iou_thresholds"): ["--T"],
}


class UsageError(Exception):
    pass


class LocalizerArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------
def parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _tuple_parser(item_type):
    def parse(text: str):
        try:
            return tuple(item_type(v) for v in text.split(",") if v.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")
    return parse


def _flag_type(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) is typing.Union and type(None) in args:
        tp = next(a for a in args if a is not type(None))
    if tp is bool:
        return parse_bool
    if typing.get_origin(tp) in (tuple, list):
        return _tuple_parser(typing.get_args(tp)[0])
    return tp


def add_config_flags(parser: argparse.ArgumentParser, section: str, cls, skip: Sequence[str] = ()) -> None:
    """One --flag per dataclass field. Flags default to None so file values survive."""
    group = parser.add_argument_group(f"{section} options")
    for f in fields(cls):
        if f.name in skip:
            continue
        names = [f"--{f.name.replace('_', '-')}"] + FLAG_ALIASES.get((section, f.name), [])
        default = f.default if f.default is not MISSING else None
        group.add_argument(*names, dest=f"{section}__{f.name}", type=_flag_type(f.type), default=None,
                           metavar=f.name.upper(), help=f"default: {default}")


def resolve_config(cls, section: str, args: argparse.Namespace, file_config: Dict[str, Any], **fixed):
    """Dataclass defaults, then the --config file section, then explicit flags."""
    values = dict(file_config.get(section, {}))
    for f in fields(cls):
        flag = getattr(args, f"{section}__{f.name}", None)
        if flag is not None:
            values[f.name] = flag
    values.update(fixed)
    try:
        return cls(**values)
    except TypeError as e:
        raise UsageError(f"bad {section} configuration: {e}") from e


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        return json.load(f)


def write_run_config(out_dir: str, command: str, sections: Dict[str, Any], paths: Dict[str, Any]) -> str:
    path = os.path.join(out_dir, "run_config.json")
    with open(path, "w") as f:
        json.dump({"command": command, "paths": paths, **sections}, f, indent=2, sort_keys=True)
    return path


@contextmanager
def run_lock(out_dir: str):
    """One run per output directory."""
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory is in use by another run (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.remove(lock)


def out_subdir(out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------
# Data helpers
# ---------------------------------------------------------------------
def load_data(args, image_size: Optional[int] = None):
    """Samples and class names from --data DIR or explicit manifest paths."""
    if args.images_csv:
        images_csv, boxes_csv = args.images_csv, args.boxes_csv
        class_names = read_class_names(os.path.dirname(os.path.abspath(images_csv)))
    elif args.data:
        images_csv = os.path.join(args.data, "images.csv")
        boxes_csv = os.path.join(args.data, "boxes.csv")
        boxes_csv = boxes_csv if os.path.exists(boxes_csv) else None
        class_names = read_class_names(args.data)
    else:
        raise UsageError("one of --data or --images-csv is required")
    for path in (images_csv, boxes_csv):
        if path and not os.path.exists(path):
            raise FileNotFoundError(f"manifest not found: {path}")
    samples = load_manifest(images_csv, boxes_csv, class_names, args.image_root, image_size)
    if not samples:
        raise UsageError(f"no usable samples in {images_csv}")
    return samples, class_names


def load_split(path: str) -> SplitSpec:
    if not os.path.exists(path):
        raise FileNotFoundError(f"split file not found: {path}")
    with open(path) as f:
        return SplitSpec.from_json(f.read())


def select_part(args, samples: Sequence[Sample]) -> List[Sample]:
    split_path = args.split or os.path.join(args.out, "split.json")
    if args.part == "all":
        return list(samples)
    chosen = load_split(split_path).select(samples, args.part)
    if not chosen:
        raise UsageError(f"split {args.part!r} of {split_path} matches no loaded sample")
    return chosen


def load_model(args):
    path = args.checkpoint or os.path.join(args.out, "checkpoints", "best.pt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------
@dataclass
class Overlay:
    name: str
    image: np.ndarray
    heat: Optional[np.ndarray] = None
    gt_boxes: List[BBox] = field(default_factory=list)
    pred_boxes: List[BBox] = field(default_factory=list)
    probabilities: Dict[str, float] = field(default_factory=dict)


GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)
HEAT_ALPHA = 0.5
TEXT_LINE = 12


def blend_heat(image: np.ndarray, heat: Optional[np.ndarray], alpha: float = HEAT_ALPHA) -> np.ndarray:
    """gray * (1 - a*m) + jet(m) * (a*m); a zero map leaves the image untouched."""
    gray = np.repeat(image[..., None], 3, axis=2).astype(np.float64)
    if heat is None:
        return gray
    m = np.clip(heat, 0.0, 1.0)[..., None] * alpha
    colors = colormaps["jet"](np.clip(heat, 0.0, 1.0))[..., :3]
    return gray * (1.0 - m) + colors * m


def _draw_box(draw: ImageDraw.ImageDraw, box: BBox, scale: int, color) -> None:
    x0, y0 = int(round(box.x * scale)), int(round(box.y * scale))
    x1, y1 = int(round(box.x2 * scale)) - 1, int(round(box.y2 * scale)) - 1
    draw.rectangle([x0, y0, x1, y1], outline=color)


def render_overlays(overlays: Sequence[Overlay], out_dir: str, scale: int = 4) -> List[str]:
    """
    One PNG per overlay: heat-map blend with GT (green) and predicted (red)
    boxes, probabilities written in a strip below the image.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for ov in overlays:
        rgb = np.round(blend_heat(ov.image, ov.heat) * 255.0).astype(np.uint8)
        side = rgb.shape[0] * scale
        picture = Image.fromarray(rgb).resize((side, side), Image.Resampling.NEAREST)
        strip = TEXT_LINE * (len(ov.probabilities) + 1)
        canvas = Image.new("RGB", (side, side + strip), (0, 0, 0))
        canvas.paste(picture, (0, 0))
        draw = ImageDraw.Draw(canvas)
        for box in ov.gt_boxes:
            _draw_box(draw, box, scale, GT_COLOR)
        for box in ov.pred_boxes:
            _draw_box(draw, box, scale, PRED_COLOR)
        for i, (name, p) in enumerate(sorted(ov.probabilities.items())):
            draw.text((2, side + 2 + i * TEXT_LINE), f"{name}: {p:.3f}", fill=(255, 255, 255))
        path = os.path.join(out_dir, f"{ov.name}.png")
        canvas.save(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------
def cmd_gen_data(args, file_config) -> None:
    config = resolve_config(SyntheticConfig, "synthetic", args, file_config)
    seed = args.seed if args.seed is not None else file_config.get("seed", 0)
    with run_lock(args.out):
        samples = generate_synthetic(config, seed)
        images_csv, boxes_csv = write_manifest(samples, args.out, config.class_names)
        write_run_config(args.out, "gen-data", {"seed": seed, "synthetic": asdict(config)},
                         {"out": args.out})
    logger.info(f"Wrote {len(samples)} samples to {images_csv} and {boxes_csv}")


def _parse_toggles(text: Optional[str]) -> Dict[str, bool]:
    if text is None:
        return {}
    names = {t.strip() for t in text.split(",") if t.strip()} - {"none"}
    unknown = names - {"dl", "rv"}
    if unknown:
        raise UsageError(f"unknown toggles {sorted(unknown)}; use dl, rv or none")
    return {"use_dl": "dl" in names, "use_rv": "rv" in names}


def cmd_train(args, file_config) -> None:
    toggles = _parse_toggles(args.toggles)
    train_config = resolve_config(TrainConfig, "train", args, file_config, **toggles)
    split_config = resolve_config(SplitConfig, "split", args, file_config)
    shape_config = resolve_config(ModelConfig, "model", args, file_config, num_classes=1)
    samples, class_names = load_data(args, shape_config.input_size)
    model_config = resolve_config(ModelConfig, "model", args, file_config, num_classes=len(class_names))

    with run_lock(args.out):
        if args.split:
            split = load_split(args.split)
            if not split.val:
                carved = carve_validation(split.select(samples, "train"), split_config.val_fraction,
                                          train_config.seed)
                split = SplitSpec(carved.train, carved.val, split.test)
        else:
            split = split_by_patient(samples, split_config.fractions, train_config.seed)
        with open(os.path.join(args.out, "split.json"), "w") as f:
            f.write(split.to_json())
        write_run_config(args.out, "train",
                         {"train": asdict(train_config), "model": asdict(model_config),
                          "split": asdict(split_config)},
                         {"data": args.data, "images_csv": args.images_csv, "boxes_csv": args.boxes_csv,
                          "split": args.split, "out": args.out})

        train_samples = split.select(samples, "train")
        val_samples = split.select(samples, "val")
        logger.info(f"Training on {len(train_samples)} samples, validating on {len(val_samples)}")
        _, log = train(train_samples, val_samples, train_config, model_config, class_names, args.out)
    logger.info(f"Best epoch {log.best_epoch}; checkpoint at {os.path.join(args.out, 'checkpoints', 'best.pt')}")


def _references(pairs: Optional[List[str]]) -> Dict[str, float]:
    refs = {}
    for pair in pairs or []:
        name, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--reference expects NAME=VALUE, got {pair!r}")
        try:
            refs[name] = float(value)
        except ValueError:
            raise UsageError(f"--reference value is not a number: {pair!r}")
    return refs


def cmd_eval_cls(args, file_config) -> None:
    config = resolve_config(EvalConfig, "eval", args, file_config)
    model, class_names, extra = load_model(args)
    samples, _ = load_data(args, model.config.input_size)
    chosen = select_part(args, samples)
    with run_lock(args.out):
        aucs = evaluate_classification(chosen, model, config, class_names)
        report = EvalReport(list(class_names), auc=aucs, config={"eval": config_echo(config), "part": args.part},
                            references=_references(args.reference))
        emit_report(report, out_subdir(args.out, "reports"), name="classification")
        write_run_config(args.out, "eval-cls", {"eval": config_echo(config)},
                         {"data": args.data, "checkpoint": args.checkpoint, "part": args.part})
    logger.info(f"Mean AUC {report.mean_auc:.4f} over {len(chosen)} images")


def cmd_eval_loc(args, file_config) -> None:
    config = resolve_config(EvalConfig, "eval", args, file_config)
    model, class_names, extra = load_model(args)
    samples, _ = load_data(args, model.config.input_size)
    chosen = select_part(args, samples)
    with run_lock(args.out):
        cases = localization_cases(chosen, model, use_region_head=extra.get("use_rv", True))
        if not cases:
            logger.warning("No images with GT boxes in the selected split; nothing to localize")
        choices = select_loc_thresholds(cases, config.cv_folds, config.cv_iou, config.seed,
                                        config.default_threshold)
        accuracy = evaluate_localization_cv(cases, choices, config.iou_thresholds, config.default_threshold)
        report = EvalReport(list(class_names), localization=accuracy, thresholds=choices,
                            config={"eval": config_echo(config), "part": args.part})
        emit_report(report, out_subdir(args.out, "reports"), name="localization_report")
        write_run_config(args.out, "eval-loc", {"eval": config_echo(config)},
                         {"data": args.data, "checkpoint": args.checkpoint, "part": args.part})
    for t in config.iou_thresholds:
        logger.info(f"Localization accuracy at T={t:g}: {report.mean_localization(t):.4f}")


@torch.no_grad()
def cmd_localize(args, file_config) -> None:
    model, class_names, extra = load_model(args)
    samples, _ = load_data(args, model.config.input_size)
    chosen = select_part(args, samples)
    if args.limit:
        chosen = chosen[:args.limit]

    threshold_path = args.thresholds or os.path.join(args.out, "reports", "thresholds.csv")
    thresholds = read_thresholds(threshold_path) if os.path.exists(threshold_path) else {}
    if not thresholds:
        logger.warning(f"No threshold file at {threshold_path}; using {DEFAULT_LOC_THRESHOLD} for every class")
    policy = RegionPolicy(threshold=extra.get("cam_threshold", RegionPolicy().threshold))
    use_rv = extra.get("use_rv", True)

    with run_lock(args.out):
        overlays, rows = [], []
        for start in range(0, len(chosen), 64):
            batch = chosen[start:start + 64]
            result = infer(stack_images(batch), model, policy, extra.get("average_logits", False))
            for i, sample in enumerate(batch):
                gt_classes = sorted({c for c, _ in sample.gt_boxes})
                classes = gt_classes or predicted_classes(result.p_global[i:i + 1], policy.prob_cutoff)[0]
                probs = {class_names[c]: float(result.p_total[i, c]) for c in range(len(class_names))}
                for c in classes:
                    if use_rv:
                        amap = cam.localization_map(result.feature_map[i], model.head_global, model.head_rv, c)
                    else:
                        amap = cam.class_map(result.feature_map[i], model.head_global, c)
                    amap = cam.normalize(amap)
                    heat = cam.upsample(amap, sample.image.shape[-1])
                    boxes = cam.boxes_from_heat(heat, thresholds.get(c, DEFAULT_LOC_THRESHOLD))[:1]
                    stem = os.path.splitext(sample.sample_id)[0]
                    overlays.append(Overlay(f"{stem}__{class_names[c]}", sample.image, heat,
                                            sample.boxes_for(c), boxes, probs))
                    for box in boxes:
                        rows.append({"sample_id": sample.sample_id, "class": class_names[c],
                                     "x": box.x, "y": box.y, "w": box.w, "h": box.h,
                                     "p_total": probs[class_names[c]]})
        paths = render_overlays(overlays, out_subdir(args.out, "overlays"), args.scale)
        pd.DataFrame(rows, columns=["sample_id", "class", "x", "y", "w", "h", "p_total"]).to_csv(
            os.path.join(out_subdir(args.out, "reports"), "predicted_boxes.csv"), index=False, float_format="%.4f")
        write_run_config(args.out, "localize", {"thresholds": {class_names[c]: t for c, t in thresholds.items()}},
                         {"data": args.data, "checkpoint": args.checkpoint, "part": args.part})
    logger.info(f"Wrote {len(paths)} overlays")


def cmd_mine_inspect(args, file_config) -> None:
    config = resolve_config(PoolConfig, "pool", args, file_config)
    samples, class_names = load_data(args)
    if args.split or os.path.exists(os.path.join(args.out, "split.json")):
        samples = select_part(args, samples)
    seed = args.seed if args.seed is not None else file_config.get("seed", 0)

    with run_lock(args.out):
        reports = out_subdir(args.out, "reports")
        cache = HashCache(os.path.join(args.out, "phash.sqlite"))
        try:
            miner = TripletMiner(samples, config, seed, cache)
            cache.export_csv(os.path.join(reports, "phash.csv"))
        finally:
            cache.close()
        stats = pool_stats(miner.pools)
        stats.to_csv(os.path.join(reports, "pool_stats.csv"), index=False, float_format="%.4f")

        rng = np.random.default_rng([seed, 7])
        usable = sorted(aid for aid, p in miner.pools.items() if not p.poolless)
        triplets = []
        epoch = 0
        while usable and len(triplets) < args.n_triplets:
            anchors = [usable[k] for k in rng.integers(len(usable), size=min(256, args.n_triplets - len(triplets)))]
            triplets += miner.sample(anchors, epoch % (config.ramp_epochs + 1), rng)
            epoch += 1
        summary = {
            "anchors": len(miner.pools),
            "poolless": int(stats["poolless"].sum()) if len(stats) else 0,
            "triplets": len(triplets),
            "violations": miner.violations(triplets),
            "mean_partial_share": float(stats["partial_share"].mean()) if len(stats) else 0.0,
        }
        with open(os.path.join(reports, "mining_summary.json"), "w") as f:
            json.dump(summary, f, indent=2)
        write_run_config(args.out, "mine-inspect", {"seed": seed, "pool": asdict(config)},
                         {"data": args.data, "split": args.split, "part": args.part})
    logger.info(f"Sampled {summary['triplets']} triplets with {summary['violations']} label violations")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-cls": cmd_eval_cls,
    "eval-loc": cmd_eval_loc,
    "localize": cmd_localize,
    "mine-inspect": cmd_mine_inspect,
}


# ---------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=DEFAULT_OUTPUT_ROOT, help="output directory (default: %(default)s)")
    p.add_argument("--config", help="JSON file with config sections; explicit flags win")
    p.add_argument("--verbose", action="store_true")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory holding images.csv, boxes.csv and classes.txt")
    p.add_argument("--images-csv", help="image manifest (instead of --data)")
    p.add_argument("--boxes-csv", help="box manifest to go with --images-csv")
    p.add_argument("--image-root", help="directory image paths are relative to")


def _add_split(p: argparse.ArgumentParser, default_part: str) -> None:
    p.add_argument("--split", help="split.json (default: <out>/split.json)")
    p.add_argument("--part", default=default_part, choices=["train", "val", "test", "all"])


def _add_checkpoint(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="model checkpoint (default: <out>/checkpoints/best.pt)")


def build_parser() -> LocalizerArgumentParser:
    parser = LocalizerArgumentParser(prog="localizer", description="Joint CAM localizer")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--seed", type=int)
    add_config_flags(p, "synthetic", SyntheticConfig)

    p = sub.add_parser("train", help="train the joint model")
    _add_common(p)
    _add_data(p)
    p.add_argument("--split", help="fixed split.json; val is carved from train when it has none")
    p.add_argument("--toggles", help="comma list of enabled modules: dl, rv, or none")
    add_config_flags(p, "train", TrainConfig, skip=("use_dl", "use_rv"))
    add_config_flags(p, "model", ModelConfig, skip=("num_classes",))
    add_config_flags(p, "split", SplitConfig)

    p = sub.add_parser("eval-cls", help="per-class AUC")
    _add_common(p)
    _add_data(p)
    _add_split(p, "test")
    _add_checkpoint(p)
    p.add_argument("--reference", action="append", metavar="NAME=VALUE",
                   help="reference AUC row printed next to the measured ones")
    add_config_flags(p, "eval", EvalConfig, skip=("iou_thresholds", "cv_folds", "cv_iou", "default_threshold"))

    p = sub.add_parser("eval-loc", help="CAM thresholds by cross-validation and IoU accuracy")
    _add_common(p)
    _add_data(p)
    _add_split(p, "test")
    _add_checkpoint(p)
    add_config_flags(p, "eval", EvalConfig, skip=("score", "average_logits", "batch_size"))

    p = sub.add_parser("localize", help="heat-map overlays and predicted boxes")
    _add_common(p)
    _add_data(p)
    _add_split(p, "test")
    _add_checkpoint(p)
    p.add_argument("--thresholds", help="thresholds.csv (default: <out>/reports/thresholds.csv)")
    p.add_argument("--limit", type=int, help="only the first N images")
    p.add_argument("--scale", type=int, default=4, help="overlay upscaling factor")

    p = sub.add_parser("mine-inspect", help="audit candidate pools and sampled triplets")
    _add_common(p)
    _add_data(p)
    _add_split(p, "train")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-triplets", type=int, default=10000)
    add_config_flags(p, "pool", PoolConfig)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USER
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    try:
        COMMANDS[args.command](args, read_config_file(args.config))
    except (UsageError, ManifestError, SyntheticConfigError, CheckpointError,
            FileNotFoundError, ValueError) as e:
        logger.error(str(e))
        return EXIT_USER
    except TrainingDivergedError as e:
        logger.error(str(e))
        return EXIT_INTERNAL
    except Exception:
        logger.exception(f"{args.command} failed")
        return EXIT_INTERNAL
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
