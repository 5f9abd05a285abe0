"""A small two-stage detector: strided conv backbone, FPN, RPN and ROI heads.

Coordinate channels are injected into the FPN and RPN convolutions only; the
backbone stays translation-equivariant.  Boxes are ``(x0, y0, x1, y1)`` pixel
tensors throughout; targets are dicts with ``boxes`` and 0-based ``labels``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms, box_iou, clip_boxes_to_image, remove_small_boxes, roi_align

from lada.detector.coordconv import CoordConv2d
from lada.detector.domain import DomainDiscriminators, DomainLogits
from lada.errors import ConfigError, ShapeError

_BBOX_CLIP = math.log(1000.0 / 16)
RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass
class DetectorConfig:
    in_channels: int = 3
    num_classes: int = 1
    strides: tuple[int, ...] = (4, 8, 16, 32)
    backbone_widths: tuple[int, ...] = (16, 32, 48, 64)
    fpn_channels: int = 32
    # coordinate channel placement
    coord_fpn_lateral: bool = True
    coord_fpn_output: bool = False
    coord_rpn: bool = True
    # anchors: size = anchor_base * stride * scale, aspect = h / w
    anchor_base: float = 4.0
    anchor_scales: tuple[float, ...] = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    rpn_batch_size: int = 256
    rpn_positive_fraction: float = 0.5
    rpn_pre_nms_top_n: int = 1000
    rpn_post_nms_top_n: int = 300
    rpn_nms: float = 0.7
    roi_fg_iou: float = 0.5
    roi_batch_size: int = 128
    roi_positive_fraction: float = 0.25
    roi_pool: int = 7
    roi_hidden: int = 128
    score_thresh: float = 0.01
    det_nms: float = 0.5
    detections_per_img: int = 100
    disc_hidden: int = 32

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        if len(self.strides) != len(self.backbone_widths):
            raise ConfigError("one backbone width per pyramid stride is required")
        prev = 1
        for s in self.strides:
            if s <= prev or s & (s - 1) or s % prev:
                raise ConfigError(f"strides must be increasing powers of two, got {self.strides}")
            prev = s

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        return asdict(self)


def toy_config(**overrides) -> DetectorConfig:
    """Narrow widths and small sampling budgets for 64 x 64 CPU experiments."""
    kw = dict(backbone_widths=(8, 16, 24, 32), fpn_channels=16, anchor_base=2.0,
              rpn_batch_size=64, roi_batch_size=32, rpn_pre_nms_top_n=200,
              rpn_post_nms_top_n=50, roi_hidden=64, disc_hidden=16)
    kw.update(overrides)
    return DetectorConfig(**kw)


@dataclass
class DetectorOutput:
    features: list[torch.Tensor]
    objectness: list[torch.Tensor]                 # per level, (N, A, H, W)
    proposals: list[torch.Tensor]                  # per image, (P, 4)
    detections: list[dict] | None = None           # per image: boxes, scores, labels
    roi_features: torch.Tensor | None = None       # (R, C, p, p)
    roi_batch_index: torch.Tensor | None = None    # (R,)
    losses: dict[str, torch.Tensor] = field(default_factory=dict)  # per image, (N,)


def encode_boxes(reference: torch.Tensor, boxes: torch.Tensor, weights) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    return torch.stack([
        wx * (bx - rx) / rw, wy * (by - ry) / rh, ww * torch.log(bw / rw), wh * torch.log(bh / rh)
    ], dim=1)


def decode_boxes(reference: torch.Tensor, deltas: torch.Tensor, weights) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_BBOX_CLIP)
    dh = (deltas[:, 3] / wh).clamp(max=_BBOX_CLIP)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def _conv_block(cin, cout, n_down):
    layers = []
    for _ in range(n_down):
        layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
        cin = cout
    layers += [nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    """Plain strided convolutions, one block per pyramid level."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        blocks, cin, prev = [], cfg.in_channels, 1
        for stride, width in zip(cfg.strides, cfg.backbone_widths):
            blocks.append(_conv_block(cin, width, int(math.log2(stride // prev))))
            cin, prev = width, stride
        self.blocks = nn.ModuleList(blocks)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs


def _conv(cin, cout, k, coords, **kw):
    return CoordConv2d(cin, cout, k, **kw) if coords else nn.Conv2d(cin, cout, k, **kw)


class FPN(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        c = cfg.fpn_channels
        self.lateral = nn.ModuleList(
            _conv(w, c, 1, cfg.coord_fpn_lateral) for w in cfg.backbone_widths)
        self.output = nn.ModuleList(
            _conv(c, c, 3, cfg.coord_fpn_output, padding=1) for _ in cfg.backbone_widths)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=1)
                nn.init.zeros_(m.bias)

    def forward(self, feats):
        laterals = [lat(f) for lat, f in zip(self.lateral, feats)]
        merged = [laterals[-1]]
        for lat in reversed(laterals[:-1]):
            merged.insert(0, lat + F.interpolate(merged[0], size=lat.shape[-2:], mode="nearest"))
        return [out(m) for out, m in zip(self.output, merged)]


class RPNHead(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        c, a = cfg.fpn_channels, cfg.num_anchors
        self.conv = _conv(c, c, 3, cfg.coord_rpn, padding=1)
        self.cls = nn.Conv2d(c, a, 1)
        self.bbox = nn.Conv2d(c, 4 * a, 1)
        for layer in (self.cls, self.bbox):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, features):
        logits, deltas = [], []
        for f in features:
            t = F.relu(self.conv(f))
            logits.append(self.cls(t))
            deltas.append(self.bbox(t))
        return logits, deltas


class ROIHead(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        d = cfg.fpn_channels * cfg.roi_pool ** 2
        self.fc1 = nn.Linear(d, cfg.roi_hidden)
        self.fc2 = nn.Linear(cfg.roi_hidden, cfg.roi_hidden)
        self.cls = nn.Linear(cfg.roi_hidden, cfg.num_classes + 1)
        self.bbox = nn.Linear(cfg.roi_hidden, 4 * cfg.num_classes)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.bbox.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.bbox.bias)

    def forward(self, pooled):
        x = F.relu(self.fc1(pooled.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.bbox(x)


def _sample(labels: torch.Tensor, batch_size: int, pos_fraction: float, generator):
    """Indices of a random positive/negative subset; ``labels`` is 1/0/-1."""
    pos = torch.nonzero(labels >= 1).squeeze(1)
    neg = torch.nonzero(labels == 0).squeeze(1)
    n_pos = min(pos.numel(), int(batch_size * pos_fraction))
    n_neg = min(neg.numel(), batch_size - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return pos, neg


def match_anchors(anchors: torch.Tensor, gt: torch.Tensor, cfg: DetectorConfig):
    """Label anchors 1 (object), 0 (background) or -1 (ignored) and return the
    index of the ground truth each anchor is matched to."""
    labels = torch.zeros(len(anchors), dtype=torch.long)
    matched = torch.zeros(len(anchors), dtype=torch.long)
    if len(gt):
        ious = box_iou(anchors, gt)
        best, matched = ious.max(dim=1)
        labels[(best >= cfg.rpn_bg_iou) & (best < cfg.rpn_fg_iou)] = -1
        labels[best >= cfg.rpn_fg_iou] = 1
        # every ground truth keeps its best anchors even below the threshold
        per_gt = ious.max(dim=0).values
        hits = torch.nonzero((ious == per_gt.unsqueeze(0)) & (per_gt.unsqueeze(0) > 0))
        labels[hits[:, 0]] = 1
        matched[hits[:, 0]] = hits[:, 1]
    return labels, matched


def rpn_loss(anchors, logits, deltas, target, cfg: DetectorConfig, generator=None):
    """Objectness BCE over sampled anchors and box smooth-L1 over positives,
    both normalized by the sample count.  One image."""
    gt = target["boxes"].to(anchors.dtype)
    labels, matched = match_anchors(anchors, gt, cfg)
    pos, neg = _sample(labels, cfg.rpn_batch_size, cfg.rpn_positive_fraction, generator)
    idx = torch.cat([pos, neg])
    tgt = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]).to(logits.dtype)
    cls = F.binary_cross_entropy_with_logits(logits[idx], tgt)
    if len(pos):
        reg = encode_boxes(anchors[pos], gt[matched[pos]], RPN_WEIGHTS)
        box = F.smooth_l1_loss(deltas[pos], reg, beta=1 / 9, reduction="sum") / len(idx)
    else:
        box = deltas.sum() * 0.0
    return cls, box


def roi_targets(proposals, target, cfg: DetectorConfig, generator=None):
    """Sample second-stage regions (proposals plus ground truth) for one image.

    Returns boxes, labels (0 is background, ``class_id + 1`` otherwise) and
    regression targets.
    """
    gt = target["boxes"].to(proposals.dtype)
    gl = target["labels"].long()
    cand = torch.cat([proposals, gt])
    if len(gt):
        best, matched = box_iou(cand, gt).max(dim=1)
        labels = torch.where(best >= cfg.roi_fg_iou, gl[matched] + 1, torch.zeros_like(matched))
    else:
        matched = torch.zeros(len(cand), dtype=torch.long)
        labels = torch.zeros(len(cand), dtype=torch.long)
    pos, neg = _sample(labels, cfg.roi_batch_size, cfg.roi_positive_fraction, generator)
    idx = torch.cat([pos, neg])
    if len(gt):
        reg = encode_boxes(cand[idx], gt[matched[idx]], ROI_WEIGHTS)
    else:
        reg = cand.new_zeros((len(idx), 4))
    return cand[idx], labels[idx], reg


def roi_loss(cls_logits, box_deltas, labels, reg_targets, batch_index, n_images):
    """Per-image mean classification CE and class-specific box smooth-L1."""
    ce = F.cross_entropy(cls_logits, labels, reduction="none")
    fg = labels > 0
    box_deltas = box_deltas.view(len(labels), -1, 4)
    sel = box_deltas[torch.arange(len(labels)), (labels - 1).clamp(min=0)]
    box = F.smooth_l1_loss(sel, reg_targets, beta=1.0, reduction="none").sum(1) * fg
    counts = torch.bincount(batch_index, minlength=n_images).clamp(min=1).to(ce.dtype)
    zeros = ce.new_zeros(n_images)
    return zeros.index_add(0, batch_index, ce) / counts, zeros.index_add(0, batch_index, box) / counts


class LADADetector(nn.Module):

    def __init__(self, cfg: DetectorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DetectorConfig()
        self.backbone = Backbone(cfg)
        self.fpn = FPN(cfg)
        self.rpn = RPNHead(cfg)
        self.roi_head = ROIHead(cfg)
        self.discriminators = DomainDiscriminators(
            cfg.fpn_channels, cfg.fpn_channels * cfg.roi_pool ** 2, cfg.disc_hidden)
        self._anchor_cache: dict = {}

    # ------------------------------------------------------------------ utils

    def set_coords_enabled(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, CoordConv2d):
                m.use_coords = enabled

    def coord_layers(self) -> list[CoordConv2d]:
        return [m for m in self.modules() if isinstance(m, CoordConv2d)]

    def anchors(self, image_size, dtype, device) -> list[torch.Tensor]:
        key = (tuple(image_size), dtype, device)
        if key in self._anchor_cache:
            return self._anchor_cache[key]
        h, w = image_size
        cfg = self.cfg
        per_level = []
        for stride in cfg.strides:
            base = []
            for r in cfg.anchor_ratios:
                for s in cfg.anchor_scales:
                    size = cfg.anchor_base * stride * s
                    aw, ah = size / math.sqrt(r), size * math.sqrt(r)
                    base.append([-aw / 2, -ah / 2, aw / 2, ah / 2])
            base = torch.tensor(base, dtype=dtype, device=device)
            ys = (torch.arange(h // stride, dtype=dtype, device=device) + 0.5) * stride
            xs = (torch.arange(w // stride, dtype=dtype, device=device) + 0.5) * stride
            cy, cx = torch.meshgrid(ys, xs, indexing="ij")
            shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
            per_level.append((shifts + base.unsqueeze(0)).reshape(-1, 4))
        self._anchor_cache[key] = per_level
        return per_level

    def _flatten_rpn(self, logits, deltas):
        """(N, A, H, W) maps to (N, H*W*A) in the anchor ordering."""
        flat_logits, flat_deltas = [], []
        for lg, dl in zip(logits, deltas):
            n, a, h, w = lg.shape
            flat_logits.append(lg.permute(0, 2, 3, 1).reshape(n, -1))
            flat_deltas.append(dl.view(n, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, -1, 4))
        return flat_logits, flat_deltas

    def _level_of(self, boxes: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        size = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).clamp(min=1e-6).sqrt()
        lvl = torch.round(torch.log2(size / (cfg.anchor_base * cfg.strides[0])))
        return lvl.clamp(0, len(cfg.strides) - 1).long()

    def pool(self, features, boxes_per_image):
        """ROI-align each box from the pyramid level matching its size."""
        cfg = self.cfg
        rois = torch.cat([
            torch.cat([torch.full((len(b), 1), i, dtype=b.dtype, device=b.device), b], dim=1)
            for i, b in enumerate(boxes_per_image)
        ])
        levels = self._level_of(rois[:, 1:])
        out = rois.new_zeros((len(rois), features[0].shape[1], cfg.roi_pool, cfg.roi_pool))
        for k, stride in enumerate(cfg.strides):
            idx = torch.nonzero(levels == k).squeeze(1)
            if idx.numel():
                out[idx] = roi_align(features[k], rois[idx], cfg.roi_pool, 1.0 / stride, 2, aligned=True)
        return out, rois[:, 0].long()

    # --------------------------------------------------------------- forward

    def forward(self, images: torch.Tensor, targets: list[dict] | None = None, *,
                generator: torch.Generator | None = None, detect: bool | None = None,
                proposals: list[torch.Tensor] | None = None) -> DetectorOutput:
        """Run the detector.  Losses are computed when ``targets`` are given;
        detections by default only when they are not.  ``proposals`` replaces
        the RPN's own region proposals for the second stage."""
        if images.dim() != 4 or images.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, {self.cfg.in_channels}, H, W) images, got {tuple(images.shape)}")
        n, _, h, w = images.shape
        top = self.cfg.strides[-1]
        if h % top or w % top:
            raise ShapeError(f"image size {h}x{w} is not divisible by the top stride {top}")
        if targets is not None and len(targets) != n:
            raise ShapeError(f"{len(targets)} targets for {n} images")

        features = self.fpn(self.backbone(images))
        logits, deltas = self.rpn(features)
        anchors = self.anchors((h, w), images.dtype, images.device)
        flat_logits, flat_deltas = self._flatten_rpn(logits, deltas)
        if proposals is None:
            proposals = self._proposals(anchors, flat_logits, flat_deltas, (h, w))
        elif len(proposals) != n:
            raise ShapeError(f"{len(proposals)} proposal sets for {n} images")
        out = DetectorOutput(features=features, objectness=logits, proposals=proposals)

        if targets is not None:
            all_anchors = torch.cat(anchors)
            obj = torch.cat(flat_logits, dim=1)
            dl = torch.cat(flat_deltas, dim=1)
            rpn = [rpn_loss(all_anchors, obj[i], dl[i], t, self.cfg, generator) for i, t in enumerate(targets)]
            samples = [roi_targets(p, t, self.cfg, generator) for p, t in zip(proposals, targets)]
            pooled, batch_idx = self.pool(features, [s[0] for s in samples])
            cls_logits, box_deltas = self.roi_head(pooled)
            roi_cls, roi_box = roi_loss(
                cls_logits, box_deltas, torch.cat([s[1] for s in samples]),
                torch.cat([s[2] for s in samples]), batch_idx, n)
            out.losses = {
                "rpn_cls": torch.stack([r[0] for r in rpn]),
                "rpn_box": torch.stack([r[1] for r in rpn]),
                "roi_cls": roi_cls,
                "roi_box": roi_box,
            }
            out.roi_features, out.roi_batch_index = pooled, batch_idx

        if detect if detect is not None else targets is None:
            out.detections = self._detect(features, proposals, (h, w))
        return out

    def discriminate(self, out: DetectorOutput, coefficient: float) -> DomainLogits:
        if out.roi_features is None:
            pooled, idx = self.pool(out.features, out.proposals)
            out.roi_features, out.roi_batch_index = pooled, idx
        return self.discriminators(out.features, out.roi_features, coefficient)

    # ------------------------------------------------------------ internals

    def _proposals(self, anchors, flat_logits, flat_deltas, image_size):
        cfg = self.cfg
        n = flat_logits[0].shape[0]
        result = []
        for i in range(n):
            boxes_all, scores_all, lvl_all = [], [], []
            for k, (anc, lg, dl) in enumerate(zip(anchors, flat_logits, flat_deltas)):
                scores = lg[i].detach()
                top = min(cfg.rpn_pre_nms_top_n, scores.numel())
                scores, idx = scores.topk(top)
                boxes = decode_boxes(anc[idx], dl[i, idx].detach(), RPN_WEIGHTS)
                boxes_all.append(clip_boxes_to_image(boxes, image_size))
                scores_all.append(scores)
                lvl_all.append(torch.full_like(scores, k, dtype=torch.long))
            boxes, scores, lvls = torch.cat(boxes_all), torch.cat(scores_all), torch.cat(lvl_all)
            keep = remove_small_boxes(boxes, 1e-3)
            boxes, scores, lvls = boxes[keep], scores[keep], lvls[keep]
            keep = batched_nms(boxes, scores, lvls, cfg.rpn_nms)[: cfg.rpn_post_nms_top_n]
            result.append(boxes[keep])
        return result

    @torch.no_grad()
    def _detect(self, features, proposals, image_size):
        cfg = self.cfg
        pooled, batch_idx = self.pool(features, proposals)
        cls_logits, box_deltas = self.roi_head(pooled)
        probs = F.softmax(cls_logits, dim=1)
        all_props = torch.cat(proposals)
        k = cfg.num_classes
        box_deltas = box_deltas.view(-1, k, 4)
        results = []
        for i in range(len(proposals)):
            sel = batch_idx == i
            props, p, d = all_props[sel], probs[sel], box_deltas[sel]
            boxes, scores, labels = [], [], []
            for c in range(k):
                b = clip_boxes_to_image(decode_boxes(props, d[:, c], ROI_WEIGHTS), image_size)
                boxes.append(b)
                scores.append(p[:, c + 1])
                labels.append(torch.full((len(b),), c, dtype=torch.long))
            boxes, scores, labels = torch.cat(boxes), torch.cat(scores), torch.cat(labels)
            keep = torch.nonzero(scores > cfg.score_thresh).squeeze(1)
            boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
            keep = remove_small_boxes(boxes, 1e-2)
            boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
            keep = batched_nms(boxes, scores, labels, cfg.det_nms)[: cfg.detections_per_img]
            results.append({"boxes": boxes[keep], "scores": scores[keep], "labels": labels[keep]})
        return results
