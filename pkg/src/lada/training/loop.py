"""Source-only pre-training and teacher-student domain adaptation."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from lada.detector.model import DetectorConfig, LADADetector
from lada.errors import ConfigError
from lada.metrics import Detection, EvalReport, evaluate
from lada.protocol import BBox, ImageRecord, Manifest, SOURCE
from lada.training.batching import BatchComposer, PoolStream
from lada.training.config import TrainConfig
from lada.training.ema import ema_update
from lada.training.losses import (
    LossBreakdown, adversarial_losses, consistency_losses, detection_loss, mic_loss, total_loss,
)
from lada.training.masking import apply_mask, generate_mask
from lada.training.pseudo import PseudoLabelSet, filter_pseudo_labels
from lada.training.schedule import lr_schedule

log = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

StepCallback = Callable[[int, LADADetector, "LADADetector | None", dict], None]


def _dtype(cfg: TrainConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def images_to_tensor(arrays: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """uint8 H x W x 3 arrays to a normalized (N, 3, H, W) tensor."""
    x = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).to(dtype)
    return (x / 255.0 - PIXEL_MEAN) / PIXEL_STD


def record_targets(record: ImageRecord, dtype=torch.float32, use_hidden: bool = False) -> dict:
    boxes = record.ground_truth if use_hidden else record.boxes
    if not boxes:
        return {"boxes": torch.zeros((0, 4), dtype=dtype), "labels": torch.zeros(0, dtype=torch.long)}
    return {
        "boxes": torch.tensor([b.corners() for b in boxes], dtype=dtype),
        "labels": torch.tensor([b.class_id for b in boxes], dtype=torch.long),
    }


def to_detections(image_id: str, det: dict) -> list[Detection]:
    out = []
    for box, score, label in zip(det["boxes"].tolist(), det["scores"].tolist(), det["labels"].tolist()):
        x0, y0, x1, y1 = box
        if x1 > x0 and y1 > y0:
            out.append(Detection(image_id, BBox.from_corners(int(label), x0, y0, x1, y1),
                                 min(max(score, 0.0), 1.0)))
    return out


@torch.no_grad()
def predict(model: LADADetector, records: Sequence[ImageRecord], images: Mapping[str, np.ndarray],
            batch_size: int = 32) -> list[Detection]:
    model.eval()
    dtype = next(model.parameters()).dtype
    dets: list[Detection] = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        out = model(images_to_tensor([images[r.image_id] for r in chunk], dtype))
        for r, d in zip(chunk, out.detections):
            dets.extend(to_detections(r.image_id, d))
    return dets


def evaluate_model(model: LADADetector, manifest: Manifest | Sequence[ImageRecord],
                   images: Mapping[str, np.ndarray]) -> EvalReport:
    records = list(manifest)
    dets = predict(model, records, images)
    return evaluate(dets, {r.image_id: list(r.ground_truth) for r in records})


@dataclass
class TrainResult:
    model: LADADetector
    teacher: LADADetector | None = None
    step_logs: list[dict] = field(default_factory=list)
    epoch_logs: list[dict] = field(default_factory=list)

    @property
    def final(self) -> LADADetector:
        """The model to deploy: the teacher after adaptation, else the student."""
        return self.teacher if self.teacher is not None else self.model


def _make_optimizer(model, cfg):
    return torch.optim.SGD(model.parameters(), lr=0.0, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _step_generator(cfg: TrainConfig, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)


def _apply_update(model, opt, total, cfg, step):
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss {float(total.detach())} at step {step}")
    opt.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()


class _EpochLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")
        self.rows: list[dict] = []

    def write(self, row: dict):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")


def _epoch_summary(epoch: int, steps: list[dict]) -> dict:
    keys = ("L_S", "L_M", "L_A_img", "L_A_ins", "L_C_img", "L_C_ins", "total")
    row = {"epoch": epoch, "steps": len(steps), "lr": steps[-1]["lr"]}
    row.update({k: float(np.mean([s[k] for s in steps])) for k in keys})
    for k in ("positives", "reliable_background", "unusable", "pseudo_positive_images"):
        if k in steps[0]:
            row[k] = int(sum(s[k] for s in steps))
    return row


def train_stage1(
    source: Manifest | Sequence[ImageRecord],
    images: Mapping[str, np.ndarray],
    cfg: TrainConfig,
    detector_cfg: DetectorConfig | None = None,
    *,
    model: LADADetector | None = None,
    val: Sequence[ImageRecord] | None = None,
    val_images: Mapping[str, np.ndarray] | None = None,
    log_path: str | Path | None = None,
    callback: StepCallback | None = None,
) -> TrainResult:
    """Supervised training on labeled source images only."""
    records = [r for r in source if r.label_status == "labeled"]
    if not records:
        raise ConfigError("stage 1 needs at least one labeled record")
    dtype = _dtype(cfg)
    if model is None:
        torch.manual_seed(cfg.seed)
        model = LADADetector(detector_cfg or DetectorConfig())
    model.to(dtype).train()
    opt = _make_optimizer(model, cfg)
    spe = cfg.steps_per_epoch or math.ceil(len(records) / cfg.batch_size)
    stream = PoolStream(records, np.random.default_rng([cfg.seed, 1]))
    result = TrainResult(model)
    epochs = _EpochLogger(log_path)

    step = 0
    for epoch in range(cfg.epochs):
        epoch_steps = []
        for _ in range(spe):
            lr = lr_schedule(step, cfg, spe)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = stream.take(cfg.batch_size)
            x = images_to_tensor([images[r.image_id] for r in batch], dtype)
            targets = [record_targets(r, dtype) for r in batch]
            out = model(x, targets, generator=_step_generator(cfg, step), detect=False)
            b = LossBreakdown(L_S=detection_loss(out).double().sum())
            b.total = total_loss(b, cfg.weights, n_s=len(batch), n_t=0)
            _apply_update(model, opt, b.total, cfg, step)
            row = {"step": step, "epoch": epoch, "lr": lr, "n_s": len(batch), "n_t": 0, **b.as_floats()}
            result.step_logs.append(row)
            epoch_steps.append(row)
            if callback:
                callback(step, model, None, row)
            step += 1
        summary = _epoch_summary(epoch, epoch_steps)
        if val is not None:
            summary["val_map_50"] = evaluate_model(model, val, val_images or images).map_50
            model.train()
        epochs.write(summary)
        log.info("stage1 epoch %d: %s", epoch, summary)
    result.epoch_logs = epochs.rows
    model.eval()
    return result


def pseudo_label_batch(teacher: LADADetector, records: Sequence[ImageRecord], x: torch.Tensor,
                       cfg: TrainConfig) -> list[PseudoLabelSet]:
    with torch.no_grad():
        out = teacher(x, detect=True)
    return [
        filter_pseudo_labels(to_detections(r.image_id, d), cfg.tau_u, cfg.tau_l,
                             image_id=r.image_id, use_background=cfg.use_background_pseudo)
        for r, d in zip(records, out.detections)
    ]


def train_stage2(
    source_labeled: Sequence[ImageRecord],
    target_labeled: Sequence[ImageRecord],
    target_unlabeled: Sequence[ImageRecord],
    stage1: LADADetector,
    images: Mapping[str, np.ndarray],
    cfg: TrainConfig,
    *,
    val: Sequence[ImageRecord] | None = None,
    val_images: Mapping[str, np.ndarray] | None = None,
    log_path: str | Path | None = None,
    callback: StepCallback | None = None,
) -> TrainResult:
    """Teacher-student adaptation initialized from the stage-1 weights.

    Each step: the teacher pseudo-labels the unlabeled images, the student
    learns from labeled images and from block-masked unlabeled images, the
    discriminators align source and target features, and the teacher tracks
    the student by EMA.
    """
    labeled = list(source_labeled) + list(target_labeled)
    unlabeled = list(target_unlabeled)
    dtype = _dtype(cfg)
    student = copy.deepcopy(stage1).to(dtype).train()
    teacher = copy.deepcopy(student).eval()
    teacher.requires_grad_(False)
    opt = _make_optimizer(student, cfg)
    composer = BatchComposer(labeled, unlabeled, cfg.batch_size, cfg.unlabeled_ratio, cfg.seed)
    spe = cfg.steps_per_epoch or composer.steps_per_epoch()
    result = TrainResult(student, teacher)
    epochs = _EpochLogger(log_path)

    step = 0
    for epoch in range(cfg.epochs):
        epoch_steps = []
        for _ in range(spe):
            lr = lr_schedule(step, cfg, spe)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = next(composer)
            x_lab = images_to_tensor([images[r.image_id] for r in batch.labeled], dtype)
            x_unl = images_to_tensor([images[r.image_id] for r in batch.unlabeled], dtype)
            pseudo = pseudo_label_batch(teacher, batch.unlabeled, x_unl, cfg)

            h, w = x_unl.shape[-2:]
            masked = torch.stack([
                apply_mask(img, generate_mask(h, w, cfg.mask_block, cfg.mask_ratio, seed=[cfg.seed, step, i]))
                for i, img in enumerate(x_unl)
            ])
            targets = [record_targets(r, dtype) for r in batch.labeled]
            targets += [p.targets(dtype) for p in pseudo]
            out = student(torch.cat([x_lab, masked]), targets, generator=_step_generator(cfg, step),
                          detect=False)

            n_l, n_u = len(batch.labeled), len(batch.unlabeled)
            per_image = detection_loss(out)
            l_m, skipped = mic_loss(per_image[n_l:], pseudo)
            domain = torch.tensor([0 if r.domain == SOURCE else 1 for r in batch.labeled] + [1] * n_u)
            logits = student.discriminate(out, cfg.da_rate)
            a_img, a_ins = adversarial_losses(logits, out.roi_batch_index, domain)
            c_img, c_ins = consistency_losses(logits, out.roi_batch_index, n_l + n_u)
            b = LossBreakdown(
                L_S=per_image[:n_l].double().sum(), L_M=l_m.double().sum(),
                L_A_img=a_img.double().sum(), L_A_ins=a_ins.double().sum(),
                L_C_img=c_img.double().sum(), L_C_ins=c_ins.double().sum(),
            )
            b.total = total_loss(b, cfg.weights, n_s=n_l, n_t=n_u)
            _apply_update(student, opt, b.total, cfg, step)
            if (step + 1) % cfg.ema_period == 0:
                ema_update(teacher, student, cfg.ema_decay)

            row = {
                "step": step, "epoch": epoch, "lr": lr, "n_s": n_l, "n_t": n_u, **b.as_floats(),
                "positives": sum(len(p.positives) for p in pseudo),
                "pseudo_positive_images": sum(bool(p.positives) for p in pseudo),
                "reliable_background": sum(p.is_reliable_background for p in pseudo),
                "unusable": skipped,
            }
            result.step_logs.append(row)
            epoch_steps.append(row)
            if callback:
                callback(step, student, teacher, row)
            step += 1

        summary = _epoch_summary(epoch, epoch_steps)
        if summary["unusable"] == len(epoch_steps) * composer.n_unlabeled:
            log.warning("epoch %d: every unlabeled image was unusable (%d skipped); "
                        "no pseudo-label signal this epoch", epoch, summary["unusable"])
        if val is not None:
            summary["val_map_50"] = evaluate_model(teacher, val, val_images or images).map_50
        epochs.write(summary)
        log.info("stage2 epoch %d: %s", epoch, summary)
    result.epoch_logs = epochs.rows
    student.eval()
    return result
