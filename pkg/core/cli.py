"""
Command-line surface: synth, train, eval, gradcheck, bench and detect.

Exit codes are a stable contract: 0 success, 1 usage error, 2 data error,
3 numeric failure (non-finite training values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Sequence

from config.settings import (
    LR_SCHEDULES,
    UPSAMPLE_CHOICES,
    ModelConfig,
    RunConfig,
    apply_env_overrides,
    format_model_config,
    load_model_config,
)

from upsamplers import upsample4x

from .anchors import anchors_for_scales, box_sizes, kmeans_anchors
from .benchmark import DEFAULT_WARMUP, fps_benchmark
from .data_handler import AnnotatedImage, ManifestDataset, ManifestEntry, load_all, split_dataset, write_manifest
from .detnet import build_model
from .errors import DataError, NumericError
from .evaluation import detect_images, evaluate_images
from .gradcheck_suite import run_gradcheck_suite, suite_table
from .imageio import draw_boxes, read_pgm, render_chart, write_pgm
from .labels import format_voc_xml, format_yolo_txt
from .metrics import eval_records, format_eval_table
from .optimizer import AdamState
from .persistence import ensure_config_matches, load_checkpoint
from .postprocess import Detection
from .runner import LAST_CHECKPOINT, TrainingRunner
from .scenes import SceneSpec, synthesize_dataset
from .utils import configure_logger, format_record

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GT_INTENSITY = 0.5
PRED_INTENSITY = 1.0

logger = configure_logger("irnet")


class UsageError(Exception):
    """Bad flags or flag combinations."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _common_options() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="model config file (key = value text or .json)")
    common.add_argument("--seed", type=int, help="run seed; overrides IRNET_SEED")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--threads", type=int, help="worker cap for per-item parallel work")
    return common


def _model_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scales", default="8,16", help="detection strides; only 8,16 is supported")
    parser.add_argument("--dyhead-blocks", type=int, help="number of DyHead blocks, 0 disables the head")


def _detection_options(parser: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    parser.add_argument("--conf", type=float, default=defaults.conf_threshold)
    parser.add_argument("--nms-iou", type=float, default=defaults.nms_iou)
    parser.add_argument("--upsample", choices=UPSAMPLE_CHOICES, default=defaults.upsample)
    parser.add_argument("--batch", type=int, default=defaults.batch_size)
    parser.add_argument("--class-agnostic", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    defaults = RunConfig()
    common = _common_options()
    parser = _Parser(prog="irnet", description="Infrared small-target detector toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    synth.add_argument("--n", type=int, default=32, help="number of scenes")
    synth.add_argument("--size", type=int, default=256, help="scene height and width")
    synth.add_argument("--targets", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"))
    synth.add_argument("--target-size", type=int, nargs=2, default=(2, 6), metavar=("MIN", "MAX"))
    synth.add_argument("--classes", type=int, default=1)
    synth.add_argument("--label-format", choices=("voc", "yolo"), default="voc")
    synth.add_argument("--split", action="store_true", help="also write train/val/test manifests (6:2:2)")
    synth.set_defaults(handler=cmd_synth)

    train = sub.add_parser("train", parents=[common], help="train a detector")
    train.add_argument("--manifest", type=Path, required=True)
    train.add_argument("--val-manifest", type=Path)
    train.add_argument("--epochs", type=int, default=defaults.epochs)
    train.add_argument("--lr", type=float, default=defaults.lr)
    train.add_argument("--lr-schedule", choices=LR_SCHEDULES, default=defaults.lr_schedule)
    train.add_argument("--resume", type=Path, help="checkpoint to continue from")
    train.add_argument("--recompute-anchors", action="store_true")
    train.add_argument("--no-augment", action="store_true")
    _model_options(train)
    _detection_options(train)
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--manifest", type=Path, required=True)
    _detection_options(evaluate)
    evaluate.set_defaults(handler=cmd_eval)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward")
    gradcheck.add_argument("--skip-model", action="store_true", help="leave out the full-model case")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    bench = sub.add_parser("bench", parents=[common], help="frames per second of forward + NMS")
    bench.add_argument("--checkpoint", type=Path)
    bench.add_argument("--size", type=int, help="square input size; defaults to the model's input_size")
    bench.add_argument("--iterations", type=int, default=30)
    bench.add_argument("--warmup", type=int, default=DEFAULT_WARMUP)
    _model_options(bench)
    bench.set_defaults(handler=cmd_bench)

    detect = sub.add_parser("detect", parents=[common], help="run a checkpoint on images")
    detect.add_argument("--checkpoint", type=Path, required=True)
    source = detect.add_mutually_exclusive_group(required=True)
    source.add_argument("--manifest", type=Path)
    source.add_argument("--image", type=Path)
    _detection_options(detect)
    detect.set_defaults(handler=cmd_detect)
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    defaults = RunConfig()
    run = RunConfig(
        subcommand=args.command,
        config_path=args.config,
        seed=args.seed if args.seed is not None else defaults.seed,
        out_dir=args.out,
        epochs=getattr(args, "epochs", defaults.epochs),
        batch_size=getattr(args, "batch", defaults.batch_size),
        lr=getattr(args, "lr", defaults.lr),
        lr_schedule=getattr(args, "lr_schedule", defaults.lr_schedule),
        conf_threshold=getattr(args, "conf", defaults.conf_threshold),
        nms_iou=getattr(args, "nms_iou", defaults.nms_iou),
        upsample=getattr(args, "upsample", defaults.upsample),
        threads=args.threads,
    )
    apply_env_overrides(run, seed_from_flag=args.seed is not None)
    run.validate()
    return run


def model_config_from_args(args: argparse.Namespace) -> ModelConfig:
    config = load_model_config(args.config)
    scales = tuple(int(part) for part in str(getattr(args, "scales", "8,16")).replace(" ", "").split(",") if part)
    if scales != tuple(config.strides):
        raise UsageError(f"--scales {','.join(map(str, scales))} is not supported; the detector has strides 8,16")
    blocks = getattr(args, "dyhead_blocks", None)
    if blocks is not None:
        config = replace(config, dyhead_blocks=blocks)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def prepare_images(images: Sequence[AnnotatedImage], method: str) -> List[AnnotatedImage]:
    """Apply x4 upsampling to frames that are not already upscaled."""
    if method == "none":
        return list(images)
    return [image if image.scale_factor != 1 else upsample4x(image, method) for image in images]


def load_manifest_images(path: Path, method: str) -> List[AnnotatedImage]:
    images = load_all(ManifestDataset(path))
    if not images:
        logger.warning("Manifest %s lists no images", path)
    return prepare_images(images, method)


def write_detections(
    out_dir: Path, images: Sequence[AnnotatedImage], detections: Sequence[Sequence[Detection]]
) -> Path:
    """One ``key=value`` line per detection plus one overlay graymap per image."""
    overlays = out_dir / "overlays"
    overlays.mkdir(parents=True, exist_ok=True)
    lines: List[str] = []
    for index, (image, found) in enumerate(zip(images, detections)):
        for det in found:
            x1, y1, x2, y2 = det.box
            lines.append(
                format_record(
                    image=image.source_id,
                    class_id=det.class_id,
                    score=det.score,
                    x1=x1,
                    y1=y1,
                    x2=x2,
                    y2=y2,
                    scale=image.scale_factor,
                )
            )
        canvas = draw_boxes(image.pixels, [box.corners for box in image.boxes], GT_INTENSITY)
        canvas = draw_boxes(canvas, [det.box for det in found], PRED_INTENSITY)
        write_pgm(overlays / f"{index:05d}_{image.source_id}.pgm", canvas)
    path = out_dir / "detections.txt"
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    run = run_config_from_args(args)
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    spec = SceneSpec(
        height=args.size,
        width=args.size,
        min_targets=args.targets[0],
        max_targets=args.targets[1],
        size_range=tuple(args.target_size),
        num_classes=args.classes,
        seed=run.seed,
    )
    scenes = synthesize_dataset(spec, args.n, workers=run.threads)
    out = Path(run.out_dir)
    entries: List[ManifestEntry] = []
    for scene in scenes:
        image_path = write_pgm(out / "images" / f"{scene.source_id}.pgm", scene.pixels)
        if args.label_format == "voc":
            label_path = out / "labels" / f"{scene.source_id}.xml"
            payload = format_voc_xml(scene.boxes, image_path.name, scene.width, scene.height)
        else:
            label_path = out / "labels" / f"{scene.source_id}.txt"
            payload = format_yolo_txt(scene.boxes, scene.width, scene.height)
        label_path.parent.mkdir(parents=True, exist_ok=True)
        label_path.write_bytes(payload)
        entries.append(ManifestEntry(image=image_path, label=label_path))
    manifest = write_manifest(out / "manifest.txt", entries)
    if args.split:
        for name, part in zip(("train", "val", "test"), split_dataset(entries, seed=run.seed)):
            write_manifest(out / f"{name}.txt", part)
    logger.info("Wrote %s scenes to %s", len(scenes), manifest)
    print(format_record(kind="synth", scenes=len(scenes), manifest=manifest, seed=run.seed))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = run_config_from_args(args)
    train_images = load_manifest_images(args.manifest, run.upsample)
    if not train_images:
        raise DataError(f"training manifest {args.manifest} lists no images")
    val_images = load_manifest_images(args.val_manifest, run.upsample) if args.val_manifest else []

    start_epoch = 0
    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        if args.config:
            ensure_config_matches(checkpoint, model_config_from_args(args))
        model = checkpoint.model
        state = checkpoint.state or AdamState(lr=run.lr, beta1=run.beta1, beta2=run.beta2, step=checkpoint.step)
        start_epoch = int(checkpoint.extra.get("epoch", -1)) + 1
        logger.info("Resuming from %s at epoch %s step %s", args.resume, start_epoch, state.step)
    else:
        config = model_config_from_args(args)
        if args.recompute_anchors:
            fitted = kmeans_anchors(box_sizes(train_images), count=6, seed=run.seed)
            config = replace(config, anchors=anchors_for_scales(fitted, config.anchors_per_scale))
            config.validate()
            logger.info("Recomputed anchors: %s", config.anchors)
        model = build_model(config, seed=run.seed)
        state = AdamState(lr=run.lr, beta1=run.beta1, beta2=run.beta2)

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.cfg").write_text(format_model_config(model.config), encoding="utf-8")
    runner = TrainingRunner(
        model,
        state,
        train_images,
        run,
        val_images=val_images,
        use_augmentation=not args.no_augment,
        start_epoch=start_epoch,
    )
    summary = runner.start()
    history = summary.history
    if history:
        chart = render_chart(
            {
                "loss": [s.loss for s in history],
                "box": [s.box for s in history],
                "obj": [s.obj for s in history],
            }
        )
        write_pgm(out / "loss_curve.pgm", chart, maxval=255)
    print(
        format_record(
            kind="train",
            epochs=summary.epochs_run,
            steps=state.step,
            initial_loss=summary.initial_loss,
            final_loss=summary.final_loss,
            final_train_map50=summary.final_train_map50,
            checkpoint=out / LAST_CHECKPOINT,
            interrupted=summary.interrupted,
        )
    )
    return EXIT_OK


def _load_for_inference(args: argparse.Namespace):
    checkpoint = load_checkpoint(args.checkpoint)
    if args.config:
        ensure_config_matches(checkpoint, load_model_config(args.config))
    return checkpoint.model


def cmd_eval(args: argparse.Namespace) -> int:
    run = run_config_from_args(args)
    model = _load_for_inference(args)
    images = load_manifest_images(args.manifest, run.upsample)
    evaluation = evaluate_images(
        model,
        images,
        run.conf_threshold,
        run.nms_iou,
        run.batch_size,
        class_agnostic=args.class_agnostic,
        workers=run.threads,
    )
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = format_eval_table(evaluation.result)
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    records = eval_records(evaluation.result)
    (out / "metrics.records").write_text("".join(line + "\n" for line in records), encoding="utf-8")
    detections = evaluation.detections or [[] for _ in images]
    # AP curves use a low decode floor; the written detections honour --conf
    kept = [[det for det in found if det.score >= run.conf_threshold] for found in detections]
    write_detections(out, images, kept)
    print(table)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    run = run_config_from_args(args)
    cases = run_gradcheck_suite(seed=run.seed, include_model=not args.skip_model)
    table = suite_table(cases)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [line for case in cases for line in case.report.records()]
    (out / "gradcheck.txt").write_text(table + "\n" + "".join(line + "\n" for line in records), encoding="utf-8")
    print(table)
    failed = [case.label for case in cases if not case.report.passed]
    if failed:
        logger.error("Gradient check failed for: %s", ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    run = run_config_from_args(args)
    if args.checkpoint:
        model = _load_for_inference(args)
    else:
        model = build_model(model_config_from_args(args), seed=run.seed)
    size = args.size or model.config.input_size
    try:
        result = fps_benchmark(
            model,
            (size, size),
            iterations=args.iterations,
            warmup=args.warmup,
            conf_threshold=run.conf_threshold,
            iou_threshold=run.nms_iou,
            seed=run.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    line = result.record()
    (out / "bench.txt").write_text(line + "\n", encoding="utf-8")
    print(line)
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    run = run_config_from_args(args)
    model = _load_for_inference(args)
    if args.manifest:
        images = load_manifest_images(args.manifest, run.upsample)
    else:
        pixels = read_pgm(args.image)
        images = prepare_images([AnnotatedImage(pixels=pixels, boxes=[], source_id=args.image.stem)], run.upsample)
    detections = (
        detect_images(
            model,
            images,
            run.conf_threshold,
            run.nms_iou,
            run.batch_size,
            class_agnostic=args.class_agnostic,
            workers=run.threads,
        )
        if images
        else []
    )
    path = write_detections(Path(run.out_dir), images, detections)
    print(format_record(kind="detect", images=len(images), detections=sum(len(d) for d in detections), file=path))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler: Callable[[argparse.Namespace], int] = args.handler
        return handler(args)
    except UsageError as exc:
        print(parser.format_usage(), file=sys.stderr, end="")
        logger.error("Usage error: %s", exc)
        return EXIT_USAGE
    except DataError as exc:
        logger.error("Data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        logger.error("Numeric failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        logger.error("Invalid arguments: %s", exc)
        return EXIT_USAGE
