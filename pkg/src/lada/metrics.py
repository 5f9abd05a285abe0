"""Box overlap and COCO-style average precision."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from lada.errors import NoGroundTruthError, SchemaError
from lada.protocol import BBox

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "box": self.box.to_dict(), "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(str(d["image_id"]), BBox.from_dict(d["box"]), float(d["score"]))


@dataclass
class EvalReport:
    map_50_95: float
    map_50: float
    per_threshold_ap: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_threshold_ap"] = [list(p) for p in self.per_threshold_ap]
        return d


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _match(dets: list[Detection], gts: Mapping[str, Sequence[BBox]], thr: float) -> np.ndarray:
    """Flag each detection (already score-sorted) as true or false positive.

    Each detection takes the highest-IoU ground truth still unmatched in its
    image, provided the IoU reaches ``thr``.
    """
    taken = {k: [False] * len(v) for k, v in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        cands = gts.get(d.image_id, ())
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if taken[d.image_id][j]:
                continue
            o = iou(d.box, g)
            # strict '>' so the first of equal-IoU ground truths wins
            if o >= thr and o > best:
                best, best_j = o, j
        if best_j >= 0:
            taken[d.image_id][best_j] = True
            tp[i] = True
    return tp


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope: max precision at any recall >= this one
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _sorted(dets: Iterable[Detection]) -> list[Detection]:
    # stable sort keeps input order among equal scores
    return sorted(dets, key=lambda d: -d.score)


def average_precision(
    dets: Iterable[Detection], gts: Mapping[str, Sequence[BBox]], iou_threshold: float = 0.5
) -> float:
    """101-point interpolated AP of one class.

    ``gts`` maps image id to ground-truth boxes; images mapped to an empty
    list are background images, and detections on them are false positives.
    Raises :class:`NoGroundTruthError` when there is no ground truth at all.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise NoGroundTruthError("average precision is undefined without ground truth")
    dets = _sorted(dets)
    return _interpolated_ap(_match(dets, gts, iou_threshold), n_gt)


def evaluate(dets: Iterable[Detection], gts: Mapping[str, Sequence[BBox]]) -> EvalReport:
    """AP at IoU 0.50:0.95, averaged over classes that have ground truth."""
    dets = list(dets)
    classes = sorted({b.class_id for boxes in gts.values() for b in boxes})
    if not classes:
        raise NoGroundTruthError("evaluation needs at least one ground-truth box")
    per_thr = []
    for thr in IOU_THRESHOLDS:
        aps = []
        for c in classes:
            c_gts = {k: [b for b in v if b.class_id == c] for k, v in gts.items()}
            c_dets = [d for d in dets if d.box.class_id == c]
            aps.append(average_precision(c_dets, c_gts, thr))
        per_thr.append((thr, float(np.mean(aps))))
    map_50_95 = sum(ap for _, ap in per_thr) / len(per_thr)
    return EvalReport(map_50_95=map_50_95, map_50=per_thr[0][1], per_threshold_ap=per_thr)


def save_detections(dets: Iterable[Detection], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_dict()) + "\n")


def load_detections(path: str | Path) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Detection.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"bad detection: {exc}", line=lineno) from exc
    return out
