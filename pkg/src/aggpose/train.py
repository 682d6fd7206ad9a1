"""Supervised heatmap-regression training loop.

The loop is bitwise deterministic for a given seed: batch order is a pure
function of (seed, epoch), augmentation draws come from per-(seed, step,
slot) generators, and resuming from a checkpoint replays the identical
continuation because no hidden random state survives between steps.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import ops
from .checkpoint import (
    OPTIM_PREFIX,
    PARAM_PREFIX,
    read_checkpoint,
    write_checkpoint,
)
from .errors import DataError, TrainAbort
from .heatmap import decode, encode
from .metrics import evaluate
from .schemas import DetectionRecord, KeypointSchema
from .coco_io import load_coco_keypoints
from .tensor import Tape, Tensor, no_grad
from .transforms import AugmentConfig, crop_instance, crop_with_augment, detection_from_crop

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    milestones: tuple = (0.7, 0.9)  # fractions of total_steps; lr drops 10x at each
    lr_decay: float = 0.1
    seed: int = 0
    heatmap_sigma: float = 2.0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    freeze_phases: tuple = ()  # ((until_step, (level, ...)), ...)
    checkpoint_interval: int = 0  # 0: only final/best checkpoints
    eval_interval: int = 0  # 0: evaluate once at the end
    holdout_fraction: float = 0.0  # 0: evaluate on the training set

    def __post_init__(self):
        if self.lr <= 0:
            raise DataError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise DataError(f"batch size must be >= 1, got {self.batch_size}")
        if self.total_steps < 1:
            raise DataError(f"total_steps must be >= 1, got {self.total_steps}")
        if list(self.milestones) != sorted(self.milestones):
            raise DataError(f"milestones must increase, got {self.milestones}")


def lr_at(cfg: TrainConfig, step: int) -> float:
    lr = cfg.lr
    for frac in cfg.milestones:
        if step >= int(frac * cfg.total_steps):
            lr *= cfg.lr_decay
    return lr


class PoseDataset:
    """Annotation records plus lazily loaded images from one directory."""

    def __init__(self, ann_file, images_dir, schema: KeypointSchema):
        self.schema = schema
        self.records, self.images = load_coco_keypoints(ann_file, schema)
        self.images_dir = images_dir
        self._cache = {}

    def __len__(self):
        return len(self.records)

    def load_image(self, image_id: int) -> np.ndarray:
        if image_id not in self._cache:
            info = self.images[image_id]
            path = os.path.join(self.images_dir, info.file_name)
            try:
                with Image.open(path) as img:
                    self._cache[image_id] = np.asarray(img.convert("RGB"))
            except OSError as e:
                raise DataError(f"cannot read image {path}: {e}") from e
        return self._cache[image_id]


def make_batch(samples, heatmap_size, sigma, dtype):
    """Stack instance crops into model input + targets + channel weights."""
    images = np.stack([s.image for s in samples]).astype(dtype)
    targets, weights = [], []
    for s in samples:
        t, w = encode(s.keypoints, heatmap_size, sigma=sigma)
        targets.append(t)
        weights.append(w)
    return (
        Tensor(images),
        Tensor(np.stack(targets).astype(dtype)),
        Tensor(np.stack(weights).astype(dtype)),
    )


def heatmap_loss(pred: Tensor, target: Tensor, weight: Tensor) -> Tensor:
    """Mean squared error over annotated channels: the denominator counts
    visible (batch, keypoint) slices, so fully-annotated batches reduce to
    the plain MSE."""
    visible = float(max(weight.data.sum(), 1.0))
    spatial = float(np.prod(pred.shape[2:]))
    return ops.masked_mse(pred, target, weight, denom=visible * spatial)


def train_step(model, batch, optimizer, lr) -> float:
    """One forward/backward/update; aborts on a non-finite loss."""
    images, targets, weights = batch
    optimizer.zero_grad()
    with Tape() as tape:
        pred = model(images)
        loss = heatmap_loss(pred, targets, weights)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            norms = optimizer.grad_norms()
            worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
            raise TrainAbort(
                f"non-finite loss {loss_value} at optimizer step {optimizer.t + 1}",
                diagnostics={"lr": lr, "loss": loss_value, "largest_grad_norms": worst},
            )
        tape.backward(loss)
    optimizer.step(lr=lr)
    return loss_value


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def _batch_indices(cfg: TrainConfig, step: int, n: int) -> np.ndarray:
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    epoch = step // steps_per_epoch
    pos = (step % steps_per_epoch) * cfg.batch_size
    order = _epoch_order(cfg.seed, epoch, n)
    return order[pos : pos + cfg.batch_size]


def _apply_freeze(model, cfg: TrainConfig, step: int) -> None:
    model.unfreeze_all()
    for until_step, levels in cfg.freeze_phases:
        if step < until_step:
            model.freeze_levels(levels)
            return


@dataclass
class FitResult:
    log_rows: list  # (step, loss, lr, eval_ap or None)
    best_ap: float
    best_path: str | None
    last_path: str | None


def predict_records(model, dataset: PoseDataset, records, batch_size: int = 16):
    """Run the model over ground-truth boxes and map decoded keypoints
    back to original coordinates."""
    heat_stride = 4
    out = []
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            samples = [
                crop_instance(
                    dataset.load_image(r.image_id), r, model.cfg.input_size, dataset.schema
                )
                for r in chunk
            ]
            images = Tensor(np.stack([s.image for s in samples]).astype(model.dtype))
            maps = model(images).data
            for sample, m in zip(samples, maps):
                decoded = decode(m, stride=heat_stride)
                kps = detection_from_crop(sample, decoded.xy, decoded.score)
                out.append(
                    DetectionRecord(
                        image_id=sample.image_id,
                        keypoints=kps,
                        score=float(decoded.score.mean()),
                    )
                )
    return out


def evaluate_model(model, dataset: PoseDataset, records) -> float:
    dets = predict_records(model, dataset, records)
    return evaluate(dets, records, dataset.schema).ap


def fit(model, dataset: PoseDataset, cfg: TrainConfig, out_dir=None, resume_from=None) -> FitResult:
    from .optim import AdamW

    n = len(dataset)
    if n == 0:
        raise DataError("empty dataset")
    heatmap_size = (model.cfg.input_size[0] // 4, model.cfg.input_size[1] // 4)

    split = int(round(n * (1.0 - cfg.holdout_fraction)))
    split = min(max(split, 1), n)
    train_records = dataset.records[:split]
    eval_records = dataset.records[split:] or dataset.records[:split]

    optimizer = AdamW(
        list(model.named_parameters()),
        lr=cfg.lr,
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    start_step = 0
    best_ap = -1.0
    if resume_from is not None:
        ckpt = read_checkpoint(resume_from)
        from .checkpoint import load_into_model

        load_into_model(model, ckpt, policy="strict")
        optimizer.load_state_arrays(ckpt.section(OPTIM_PREFIX))
        start_step = int(ckpt.metadata.get("step", 0))
        best_ap = float(ckpt.metadata.get("best_ap", -1.0))

    log_rows = []
    best_path = last_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def save(path_name, step):
        arrays = {PARAM_PREFIX + k: v for k, v in model.state_arrays().items()}
        arrays.update({OPTIM_PREFIX + k: v for k, v in optimizer.state_arrays().items()})
        meta = {
            "config": model.cfg.to_dict(),
            "config_hash": model.cfg.config_hash(),
            "step": step,
            "best_ap": best_ap,
            "seed": cfg.seed,
        }
        path = os.path.join(out_dir, path_name)
        write_checkpoint(path, arrays, meta)
        return path

    for step in range(start_step, cfg.total_steps):
        _apply_freeze(model, cfg, step)
        idx = _batch_indices(cfg, step, len(train_records))
        samples = []
        for slot, record_index in enumerate(idx):
            r = train_records[record_index]
            rng = np.random.default_rng([cfg.seed, 11, step, slot])
            samples.append(
                crop_with_augment(
                    dataset.load_image(r.image_id),
                    r,
                    model.cfg.input_size,
                    dataset.schema,
                    rng,
                    cfg.augment,
                )
            )
        batch = make_batch(samples, heatmap_size, cfg.heatmap_sigma, model.dtype)
        lr = lr_at(cfg, step)
        loss = train_step(model, batch, optimizer, lr)

        eval_ap = None
        done = step + 1 == cfg.total_steps
        if done or (cfg.eval_interval and (step + 1) % cfg.eval_interval == 0):
            eval_ap = evaluate_model(model, dataset, eval_records)
            if eval_ap > best_ap:
                best_ap = eval_ap
                if out_dir is not None:
                    best_path = save("best.ckpt", step + 1)
        log_rows.append((step, loss, lr, eval_ap))
        if log.isEnabledFor(logging.INFO) and (step % 50 == 0 or done):
            log.info("step %d loss %.6f lr %.2e", step, loss, lr)
        if out_dir is not None and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
            last_path = save(f"step_{step + 1:06d}.ckpt", step + 1)

    if out_dir is not None:
        last_path = save("last.ckpt", cfg.total_steps)
        if best_path is None:
            best_path = last_path
    return FitResult(log_rows=log_rows, best_ap=best_ap, best_path=best_path, last_path=last_path)


def write_log_tsv(path, log_rows) -> None:
    with open(path, "w") as f:
        f.write("step\tloss\tlr\teval_ap\n")
        for step, loss, lr, eval_ap in log_rows:
            ap = "" if eval_ap is None else f"{eval_ap:.6f}"
            f.write(f"{step}\t{loss:.10g}\t{lr:.6g}\t{ap}\n")
