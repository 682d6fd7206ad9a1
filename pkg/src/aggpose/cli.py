"""Batch command-line interface.

Subcommands: train, eval, infer, gradcheck, synth, bench.  Exit codes:
0 success, 1 check or metric failure, 2 usage/input error.  Commands
never mutate their inputs; files are written to a temp name and renamed.
Report paths emit a tab-separated table plus a rendered figure.

Environment: AGGPOSE_VERBOSE=1 enables info logging, AGGPOSE_THREADS
caps the BLAS thread pool (the --threads flag overrides it).
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
import tempfile

log = logging.getLogger("aggpose")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Input problem; exits with code 2 and the message."""


def _apply_thread_cap(threads) -> None:
    cap = threads if threads is not None else os.environ.get("AGGPOSE_THREADS")
    if cap is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(cap)


def _atomic_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_figure(path, render) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    tmp = os.path.join(directory, f".tmp_{os.path.basename(path)}")
    render(tmp)
    os.replace(tmp, path)


def _require(path, kind: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"{kind} not found: {path}")
    return path


def _plain(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return None  # drop non-serializable entries (e.g. the handler)


class RunManifest:
    def __init__(self, command: str, config: dict, seed):
        from . import __version__

        self.data = {
            "command": command,
            "config": _plain(config),
            "seed": seed,
            "build": f"aggpose-{__version__}",
            "started": datetime.datetime.now().isoformat(timespec="seconds"),
            "finished": None,
            "outputs": [],
        }

    def add_output(self, path) -> str:
        self.data["outputs"].append(os.path.abspath(path))
        return path

    def write(self, path) -> None:
        self.data["finished"] = datetime.datetime.now().isoformat(timespec="seconds")
        missing = [p for p in self.data["outputs"] if not os.path.exists(p)]
        if missing:
            raise RuntimeError(f"manifest lists outputs that were never written: {missing}")
        _atomic_text(path, json.dumps(self.data, indent=2) + "\n")


def _load_schema(args):
    from .schemas import schema_by_name

    return schema_by_name(args.schema, k=getattr(args, "k", 0.08))


def _model_config(args):
    from .model import VARIANTS, load_config

    if getattr(args, "config", None):
        return load_config(_require(args.config, "config file"))
    variant = getattr(args, "variant", None)
    if variant:
        if variant not in VARIANTS:
            raise CliError(f"unknown variant {variant!r}; available: {sorted(VARIANTS)}")
        kwargs = {}
        if getattr(args, "keypoints", None):
            kwargs["num_keypoints"] = args.keypoints
        return VARIANTS[variant](**kwargs)
    raise CliError("provide --config FILE or --variant NAME")


def _model_from_checkpoint(path, dtype_name="float32"):
    import numpy as np

    from .checkpoint import load_into_model, read_checkpoint
    from .model import AggPose, config_from_dict

    ckpt = read_checkpoint(_require(path, "checkpoint"))
    if "config" not in ckpt.metadata:
        raise CliError(f"checkpoint {path} carries no model config")
    cfg = config_from_dict(ckpt.metadata["config"])
    model = AggPose(cfg, dtype=np.dtype(dtype_name))
    load_into_model(model, ckpt, policy="strict")
    return model, ckpt


# --------------------------------------------------------------------------- train


def cmd_train(args) -> int:
    import numpy as np

    from .model import AggPose, save_config
    from .train import PoseDataset, TrainConfig, fit, write_log_tsv
    from .transforms import AugmentConfig
    from .viz import save_loss_curve

    cfg = _model_config(args)
    schema = _load_schema(args)
    if schema.num_keypoints != cfg.num_keypoints:
        raise CliError(
            f"schema {schema.name} has {schema.num_keypoints} keypoints, "
            f"model config expects {cfg.num_keypoints}"
        )
    ann = _require(os.path.join(args.data, "annotations.json"), "annotation file")
    images_dir = _require(os.path.join(args.data, "images"), "image directory")
    dataset = PoseDataset(ann, images_dir, schema)

    try:
        milestones = tuple(float(v) for v in args.milestones.split(",") if v)
    except ValueError:
        raise CliError(f"--milestones must be comma-separated fractions, got {args.milestones!r}") from None
    train_cfg = TrainConfig(
        total_steps=args.steps,
        lr=args.lr,
        batch_size=args.batch,
        seed=args.seed,
        augment=None if args.no_augment else AugmentConfig(),
        eval_interval=args.eval_interval,
        holdout_fraction=args.holdout,
        checkpoint_interval=args.checkpoint_interval,
        heatmap_sigma=args.sigma,
        milestones=milestones,
    )
    manifest = RunManifest("train", {**cfg.to_dict(), **vars(args)}, args.seed)
    os.makedirs(args.out, exist_ok=True)

    model = AggPose(cfg, init_seed=args.seed, dtype=np.float32)
    print(f"built {cfg.variant}: {model.parameter_count()} parameters")
    result = fit(model, dataset, train_cfg, out_dir=args.out, resume_from=args.resume)

    log_path = os.path.join(args.out, "train_log.tsv")
    write_log_tsv(log_path, result.log_rows)
    manifest.add_output(log_path)
    curve_path = os.path.join(args.out, "loss_curve.png")
    _atomic_figure(curve_path, lambda p: save_loss_curve(result.log_rows, p))
    manifest.add_output(curve_path)
    config_path = os.path.join(args.out, "model_config.json")
    save_config(cfg, config_path)
    manifest.add_output(config_path)
    if result.best_path:
        manifest.add_output(result.best_path)
    if result.last_path:
        manifest.add_output(result.last_path)
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(f"final loss {result.log_rows[-1][1]:.6f}, best AP {result.best_ap:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from .coco_io import load_coco_keypoints, load_detections, load_gt_boxes, write_detections
    from .metrics import evaluate, format_report
    from .schemas import AnnotationRecord
    from .train import PoseDataset, predict_records
    from .viz import save_pr_curves

    schema = _load_schema(args)
    ann_path = _require(args.ann, "annotation file")
    manifest = RunManifest("eval", vars(args), getattr(args, "seed", 0))
    os.makedirs(args.out, exist_ok=True)

    if args.results:
        dets = load_detections(_require(args.results, "results file"), schema)
        records, _ = load_coco_keypoints(ann_path, schema)
    else:
        if not args.ckpt or not args.images:
            raise CliError("model evaluation needs --ckpt and --images (or use --results)")
        model, _ = _model_from_checkpoint(args.ckpt)
        if model.cfg.num_keypoints != schema.num_keypoints:
            raise CliError(
                f"checkpoint predicts {model.cfg.num_keypoints} keypoints, "
                f"schema {schema.name} expects {schema.num_keypoints}"
            )
        dataset = PoseDataset(ann_path, _require(args.images, "image directory"), schema)
        records = dataset.records
        if args.boxes:
            boxes = load_gt_boxes(_require(args.boxes, "box file"))
            records = [
                AnnotationRecord(
                    id=i + 1,
                    image_id=image_id,
                    keypoints=_nearest_record(dataset.records, image_id).keypoints,
                    area=_nearest_record(dataset.records, image_id).area,
                    bbox=bbox,
                )
                for i, (image_id, bbox, _score) in enumerate(boxes)
            ]
        dets = predict_records(model, dataset, records)
        det_path = os.path.join(args.out, "detections.json")
        write_detections(det_path, dets)
        manifest.add_output(det_path)
        records = dataset.records

    result = evaluate(dets, records, schema)
    report = format_report(result)
    report_path = os.path.join(args.out, "metrics.tsv")
    _atomic_text(report_path, report)
    manifest.add_output(report_path)
    curves_path = os.path.join(args.out, "pr_curves.png")
    _atomic_figure(curves_path, lambda p: save_pr_curves(result, p))
    manifest.add_output(curves_path)
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(report, end="")
    return EXIT_OK


def _nearest_record(records, image_id):
    for r in records:
        if r.image_id == image_id:
            return r
    raise CliError(f"box file references image {image_id} with no annotation")


# --------------------------------------------------------------------------- infer


def cmd_infer(args) -> int:
    import numpy as np
    from PIL import Image, UnidentifiedImageError

    from .heatmap import decode
    from .schemas import AnnotationRecord, coco17, infant21
    from .tensor import Tensor, no_grad
    from .transforms import crop_instance, detection_from_crop

    model, _ = _model_from_checkpoint(args.ckpt)
    try:
        with Image.open(_require(args.image, "image")) as img:
            image = np.asarray(img.convert("RGB"))
    except (OSError, UnidentifiedImageError) as e:
        raise CliError(f"cannot read image {args.image}: {e}") from e

    h, w = image.shape[:2]
    if args.bbox:
        try:
            bbox = tuple(float(v) for v in args.bbox.split(","))
            assert len(bbox) == 4
        except (ValueError, AssertionError):
            raise CliError(f"--bbox must be x,y,w,h, got {args.bbox!r}") from None
    else:
        bbox = (0.0, 0.0, float(w), float(h))
    if (h, w) != tuple(model.cfg.input_size):
        log.warning(
            "image size %sx%s differs from model input %s; cropping to fit", h, w,
            model.cfg.input_size,
        )

    k = model.cfg.num_keypoints
    schema = infant21() if k == 21 else coco17() if k == 17 else None
    dummy = AnnotationRecord(
        id=0, image_id=0, keypoints=np.zeros((k, 3)), area=bbox[2] * bbox[3], bbox=bbox
    )
    sample = crop_instance(image, dummy, model.cfg.input_size, schema or infant21())
    with no_grad():
        maps = model(Tensor(sample.image[None].astype(np.float32))).data[0]
    decoded = decode(maps)
    kps = detection_from_crop(sample, decoded.xy, decoded.score)

    lines = ["keypoint\tx\ty\tconfidence"]
    for i, (x, y, score) in enumerate(kps):
        name = schema.keypoint_names[i] if schema else str(i)
        lines.append(f"{name}\t{x:.3f}\t{y:.3f}\t{score:.5f}")
    _atomic_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")

    if args.overlay:
        from .viz import save_keypoint_overlay

        _atomic_figure(
            args.overlay,
            lambda p: save_keypoint_overlay(image, kps[:, :2], p, heatmaps=maps),
        )
        print(f"wrote {args.overlay}")
    return EXIT_OK


# --------------------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import available_checks, format_results, run_checks

    try:
        results = run_checks(args.scope, seeds=args.seeds)
    except KeyError:
        print(
            f"unknown block {args.scope!r}; valid names: {', '.join(available_checks())}",
            file=sys.stderr,
        )
        return EXIT_USAGE
    text = format_results(results)
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report_path = os.path.join(args.out, "gradcheck.tsv")
        _atomic_text(report_path, text)
        from .viz import save_gradcheck_chart

        _atomic_figure(
            os.path.join(args.out, "gradcheck.png"),
            lambda p: save_gradcheck_chart(results, p),
        )
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


# --------------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    from .synthetic import generate_synthetic

    schema = _load_schema(args)
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise CliError(f"--size must be HxW, got {args.size!r}") from None
    ann_path = generate_synthetic(args.out, args.n, args.seed, (h, w), schema)
    print(f"wrote {args.n} scenes under {args.out} ({ann_path})")
    return EXIT_OK


# --------------------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    import numpy as np

    from .bench import format_bench, run_bench
    from .model import AggPose

    cfg = _model_config(args)
    model = AggPose(cfg, init_seed=args.seed, dtype=np.float32)
    report = run_bench(model, repeats=args.repeats, batch_size=args.batch, seed=args.seed)
    text = format_bench(report)
    print(text, end="")
    if args.out:
        manifest = RunManifest("bench", cfg.to_dict(), args.seed)
        os.makedirs(args.out, exist_ok=True)
        report_path = os.path.join(args.out, "bench.tsv")
        _atomic_text(report_path, text)
        manifest.add_output(report_path)
        from .viz import save_bench_chart

        chart_path = os.path.join(args.out, "bench.png")
        _atomic_figure(chart_path, lambda p: save_bench_chart(report.shares, p))
        manifest.add_output(chart_path)
        manifest.write(os.path.join(args.out, "manifest.json"))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aggpose", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--variant", help="named variant instead of --config")
    p.add_argument("--keypoints", type=int, default=None)
    p.add_argument("--data", required=True, help="directory with annotations.json and images/")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--milestones", default="0.7,0.9", help="lr decay points as fractions of --steps")
    p.add_argument("--schema", default="infant21", choices=("infant21", "coco17"))
    p.add_argument("--k", type=float, default=0.08, help="uniform OKS constant (infant schema)")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--eval-interval", type=int, default=0)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.0)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a results file")
    p.add_argument("--ckpt")
    p.add_argument("--ann", required=True)
    p.add_argument("--images")
    p.add_argument("--boxes", help="detector boxes JSON; ground-truth boxes when omitted")
    p.add_argument("--results", help="precomputed detections JSON; skips the model")
    p.add_argument("--out", required=True)
    p.add_argument("--schema", default="infant21", choices=("infant21", "coco17"))
    p.add_argument("--k", type=float, default=0.08)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one image through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="keypoints TSV path")
    p.add_argument("--overlay", default=None, help="also render an overlay PNG here")
    p.add_argument("--bbox", default=None, help="x,y,w,h person box; whole image when omitted")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--scope", default="all")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", default=None, help="directory for the TSV report and chart")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="64x48", help="image size HxW")
    p.add_argument("--schema", default="infant21", choices=("infant21", "coco17"))
    p.add_argument("--k", type=float, default=0.08)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="forward throughput and per-block time share")
    p.add_argument("--config")
    p.add_argument("--variant")
    p.add_argument("--keypoints", type=int, default=None)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO if os.environ.get("AGGPOSE_VERBOSE") else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_thread_cap(args.threads)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # input/validation problems from the library
        from .errors import (
            CheckpointError,
            ConfigError,
            DataError,
            NumericError,
            SchemaError,
            ShapeError,
            TrainAbort,
        )

        if isinstance(e, (DataError, SchemaError, ConfigError, CheckpointError, ShapeError)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        if isinstance(e, (TrainAbort, NumericError)):
            print(f"aborted: {e}", file=sys.stderr)
            if getattr(e, "diagnostics", None):
                print(json.dumps(e.diagnostics, indent=2, default=str), file=sys.stderr)
            return EXIT_CHECK_FAILED
        raise


if __name__ == "__main__":
    sys.exit(main())
