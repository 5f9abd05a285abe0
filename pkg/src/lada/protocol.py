"""Scene naming, domain splits, labeled-fraction protocols and manifest I/O.

HPWREN sub-directories are named ``YYYYMMDD_fireName_cameraName``.  A
manifest is a JSON-lines file: an optional header line carrying the split
metadata followed by one image record per line.
"""

from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lada.errors import ConfigError, EmptyManifestError, ParseError, SchemaError

SOURCE = "source"
TARGET = "target"
LABELED = "labeled"
UNLABELED = "unlabeled"

PROTOCOL_FRACTIONS = (0.005, 0.01, 0.03)
CAMERA_SUFFIXES = ("mobo-c", "mobo-m", "mobo", "iqeye")

_DATE_RE = re.compile(r"^(\d{8})([_-])(.+)$")
_CAMERA_RE = re.compile(r"(?:[a-z0-9]+-)*(?:mobo-c|mobo-m|mobo|iqeye)")
_STATION_RE = re.compile(r"[a-z0-9]+")


def round_half_up(value: float | Decimal) -> int:
    """Round to the nearest integer, halves away from zero."""
    return int(Decimal(value).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def fraction_count(fraction: float, n: int) -> int:
    # str() first so 0.005 * 20500 is exactly 102.5, not 102.4999...
    return round_half_up(Decimal(str(fraction)) * n)


@dataclass(frozen=True)
class SceneMeta:
    date: dt.date
    fire_name: str
    camera_name: str
    raw: str
    delimiters: tuple[str, str] = ("_", "_")

    def join(self) -> str:
        d1, d2 = self.delimiters
        return f"{self.date:%Y%m%d}{d1}{self.fire_name}{d2}{self.camera_name}"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center format, pixel units."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, class_id: int, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls(class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def clamp(self, width: float, height: float) -> "BBox":
        x0, y0, x1, y1 = self.corners()
        x0, x1 = max(0.0, x0), min(float(width), x1)
        y0, y1 = max(0.0, y0), min(float(height), y1)
        return BBox.from_corners(self.class_id, x0, y0, x1, y1)

    def contains(self, other: "BBox", tol: float = 1e-9) -> bool:
        a, b = self.corners(), other.corners()
        return a[0] <= b[0] + tol and a[1] <= b[1] + tol and a[2] >= b[2] - tol and a[3] >= b[3] - tol

    def scaled(self, k: float) -> "BBox":
        return BBox(self.class_id, self.cx * k, self.cy * k, self.w * k, self.h * k)

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "BBox":
        return cls(int(d["class_id"]), float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]))


@dataclass(frozen=True)
class ImageRecord:
    """One image.  Unlabeled records keep their annotations in ``hidden_boxes``,
    which only evaluation code may read."""

    image_id: str
    scene: SceneMeta
    width: int
    height: int
    boxes: tuple[BBox, ...] = ()
    domain: str = SOURCE
    label_status: str = LABELED
    hidden_boxes: tuple[BBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "hidden_boxes", tuple(self.hidden_boxes))
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.label_status not in (LABELED, UNLABELED):
            raise ValueError(f"unknown label_status {self.label_status!r}")
        if self.label_status == UNLABELED and self.boxes:
            raise ValueError(f"unlabeled record {self.image_id} carries boxes")

    @property
    def ground_truth(self) -> tuple[BBox, ...]:
        return self.boxes if self.label_status == LABELED else self.hidden_boxes

    @property
    def is_foreground(self) -> bool:
        return bool(self.ground_truth)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "scene": self.scene.raw,
            "width": self.width,
            "height": self.height,
            "boxes": [b.to_dict() for b in self.boxes],
            "domain": self.domain,
            "label_status": self.label_status,
            "hidden_boxes": [b.to_dict() for b in self.hidden_boxes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        return cls(
            image_id=str(d["image_id"]),
            scene=parse_scene_name(d["scene"]),
            width=int(d["width"]),
            height=int(d["height"]),
            boxes=tuple(BBox.from_dict(b) for b in d.get("boxes", [])),
            domain=d.get("domain", SOURCE),
            label_status=d.get("label_status", LABELED),
            hidden_boxes=tuple(BBox.from_dict(b) for b in d.get("hidden_boxes", [])),
        )


@dataclass(frozen=True)
class Manifest:
    records: tuple[ImageRecord, ...]
    split_name: str = "all"
    seed: int | None = None
    protocol: float | None = None
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        index = {}
        for i, r in enumerate(self.records):
            if r.image_id in index:
                raise SchemaError(f"duplicate image_id {r.image_id!r}", line=i + 1)
            index[r.image_id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, image_id: str) -> ImageRecord:
        return self.records[self._index[image_id]]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def counts(self) -> dict[str, int]:
        fg = sum(r.is_foreground for r in self.records)
        labeled = sum(r.label_status == LABELED for r in self.records)
        return {
            "total": len(self.records),
            "labeled": labeled,
            "unlabeled": len(self.records) - labeled,
            "foreground": fg,
            "background": len(self.records) - fg,
        }


def parse_scene_name(name: str) -> SceneMeta:
    """Split ``YYYYMMDD_fireName_cameraName`` into its parts.

    Both ``_`` and ``-`` delimit fields.  When the remainder after the date
    holds an underscore, the last underscore separates fire from camera;
    otherwise the camera is the longest lowercase dash-joined suffix ending
    in a known camera token (``mobo-c``, ``mobo-m``, ``mobo``, ``iqeye``).

    >>> parse_scene_name("20171207_Lilac_rm-s-mobo").camera_name
    'rm-s-mobo'
    """
    if not name:
        raise ParseError("empty scene name")
    m = _DATE_RE.match(name)
    if m is None:
        raise ParseError(f"{name!r}: expected an 8-digit YYYYMMDD date prefix")
    date_str, d1, rest = m.groups()
    try:
        date = dt.datetime.strptime(date_str, "%Y%m%d").date()
    except ValueError as exc:
        raise ParseError(f"{name!r}: invalid date {date_str}") from exc

    if "_" in rest:
        fire, camera = rest.rsplit("_", 1)
        if not fire or not (_CAMERA_RE.fullmatch(camera) or _STATION_RE.fullmatch(camera)):
            raise ParseError(f"{name!r}: no camera name after the last '_'")
        return SceneMeta(date, fire, camera, name, (d1, "_"))

    for i, ch in enumerate(rest):
        if ch == "-" and i > 0 and _CAMERA_RE.fullmatch(rest[i + 1:]):
            return SceneMeta(date, rest[:i], rest[i + 1:], name, (d1, "-"))
    raise ParseError(f"{name!r}: no camera suffix among {CAMERA_SUFFIXES}")


def classify_domain(meta: SceneMeta, source_scenes: Iterable[str], by_camera: bool = False) -> str:
    source_scenes = set(source_scenes)
    if not source_scenes:
        raise ConfigError("source_scenes must not be empty")
    key = meta.camera_name if by_camera else meta.raw
    return SOURCE if key in source_scenes else TARGET


def _as_records(records) -> tuple[ImageRecord, ...]:
    return tuple(records.records if isinstance(records, Manifest) else records)


def split_train_val(
    records: Sequence[ImageRecord] | Manifest, val_fraction: float, seed: int
) -> tuple[Manifest, Manifest]:
    records = _as_records(records)
    if not records:
        raise EmptyManifestError("cannot split an empty record list")
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = fraction_count(val_fraction, len(records))
    perm = np.random.default_rng(seed).permutation(len(records))
    val_idx = set(perm[:n_val].tolist())
    val = [r for i, r in enumerate(records) if i in val_idx]
    train = [r for i, r in enumerate(records) if i not in val_idx]
    return Manifest(train, "train", seed), Manifest(val, "val", seed)


def strip_labels(record: ImageRecord) -> ImageRecord:
    if record.label_status == UNLABELED:
        return record
    return replace(record, boxes=(), hidden_boxes=record.boxes, label_status=UNLABELED)


def sample_protocol(train: Manifest, fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Draw ``round(fraction * len(train))`` labeled records; the rest become
    unlabeled with their boxes moved to ``hidden_boxes``."""
    if not 0 < fraction < 1:
        raise ConfigError(f"protocol fraction must be in (0, 1), got {fraction}")
    records = _as_records(train)
    if not records:
        raise EmptyManifestError("cannot sample a protocol from an empty manifest")
    n_labeled = fraction_count(fraction, len(records))
    perm = np.random.default_rng(seed).permutation(len(records))
    chosen = set(perm[:n_labeled].tolist())
    labeled = [r for i, r in enumerate(records) if i in chosen]
    unlabeled = [strip_labels(r) for i, r in enumerate(records) if i not in chosen]
    return (
        Manifest(labeled, "labeled", seed, fraction),
        Manifest(unlabeled, "unlabeled", seed, fraction),
    )


def merge_boxes(boxes: Iterable[BBox]) -> list[BBox]:
    """Collapse every class to the single rectangle enclosing all its boxes."""
    extents: dict[int, list[float]] = {}
    first: dict[int, BBox] = {}
    for b in boxes:
        x0, y0, x1, y1 = b.corners()
        e = extents.get(b.class_id)
        if e is None:
            extents[b.class_id] = [x0, y0, x1, y1]
            first[b.class_id] = b
        else:
            first.pop(b.class_id, None)
            e[0], e[1] = min(e[0], x0), min(e[1], y0)
            e[2], e[3] = max(e[2], x1), max(e[3], y1)
    # a lone box is returned as is: the corner round trip is not exact in floats
    return [first[c] if c in first else BBox.from_corners(c, *e) for c, e in extents.items()]


def merge_record(record: ImageRecord) -> ImageRecord:
    return replace(
        record,
        boxes=tuple(merge_boxes(record.boxes)),
        hidden_boxes=tuple(merge_boxes(record.hidden_boxes)),
    )


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    header = {"manifest": {"split_name": manifest.split_name, "seed": manifest.seed,
                           "protocol": manifest.protocol}}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in manifest.records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    meta = {}
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if lineno == 1 and isinstance(obj, dict) and "manifest" in obj:
                meta = obj["manifest"]
                continue
            try:
                rec = ImageRecord.from_dict(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"bad image record: {exc}", line=lineno) from exc
            if rec.image_id in seen:
                raise SchemaError(
                    f"duplicate image_id {rec.image_id!r} (first on line {seen[rec.image_id]})",
                    line=lineno,
                )
            seen[rec.image_id] = lineno
            records.append(rec)
    return Manifest(records, meta.get("split_name", "all"), meta.get("seed"), meta.get("protocol"))


def export_coco(
    manifest: Manifest,
    path: str | Path,
    include_hidden: bool = False,
    category_names: dict[int, str] | None = None,
) -> dict:
    """Write standard COCO detection JSON.  Category ids are ``class_id + 1``."""
    images, annotations = [], []
    class_ids = set(category_names or {})
    for img_id, rec in enumerate(manifest.records, 1):
        images.append({"id": img_id, "file_name": f"{rec.image_id}.png",
                       "width": rec.width, "height": rec.height, "image_key": rec.image_id})
        boxes = rec.ground_truth if include_hidden else rec.boxes
        for b in boxes:
            x0, y0, _, _ = b.corners()
            class_ids.add(b.class_id)
            annotations.append({
                "id": len(annotations) + 1,
                "image_id": img_id,
                "category_id": b.class_id + 1,
                "bbox": [x0, y0, b.w, b.h],
                "area": b.area,
                "iscrowd": 0,
            })
    names = category_names or {}
    categories = [{"id": c + 1, "name": names.get(c, "smoke" if c == 0 else f"class_{c}")}
                  for c in sorted(class_ids)]
    coco = {"images": images, "annotations": annotations, "categories": categories}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(coco, fh)
    return coco


def load_coco_boxes(path: str | Path) -> dict[str, list[BBox]]:
    """Read a COCO file written by :func:`export_coco` back into center boxes."""
    with open(path, encoding="utf-8") as fh:
        coco = json.load(fh)
    keys = {im["id"]: im.get("image_key", Path(im["file_name"]).stem) for im in coco["images"]}
    out: dict[str, list[BBox]] = {k: [] for k in keys.values()}
    for ann in coco["annotations"]:
        x, y, w, h = ann["bbox"]
        out[keys[ann["image_id"]]].append(
            BBox.from_corners(ann["category_id"] - 1, x, y, x + w, y + h))
    return out
