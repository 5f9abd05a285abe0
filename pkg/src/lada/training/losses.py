"""Loss terms of the semi-supervised objective and their weighted combination.

Every ``L_*`` field of :class:`LossBreakdown` is a *sum* over the samples it
covers; ``total_loss`` divides by the sample counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from lada.detector.domain import DomainLogits
from lada.detector.model import DetectorOutput
from lada.errors import ConfigError
from lada.training.config import LossWeights
from lada.training.pseudo import PseudoLabelSet


@dataclass
class LossBreakdown:
    L_S: float | torch.Tensor = 0.0
    L_M: float | torch.Tensor = 0.0
    L_A_img: float | torch.Tensor = 0.0
    L_A_ins: float | torch.Tensor = 0.0
    L_C_img: float | torch.Tensor = 0.0
    L_C_ins: float | torch.Tensor = 0.0
    total: float | torch.Tensor = 0.0

    @property
    def L_A(self):
        return self.L_A_img + self.L_A_ins

    @property
    def L_C(self):
        return self.L_C_img + self.L_C_ins

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in vars(self).items()}


def _mean_term(numerator, count: int):
    if count == 0:
        if float(numerator) != 0.0:
            raise ConfigError("a loss term has samples' loss but a zero sample count")
        return numerator * 0.0
    return numerator / count


def total_loss(b: LossBreakdown, weights: LossWeights, n_s: int, n_t: int):
    """Supervised mean over labeled samples, weighted MIC mean over unlabeled
    target samples, and weighted adversarial + consistency mean over all.

    Works on floats or tensors; the operation order is fixed so a float
    recomputation reproduces a float64 tensor total bit for bit.
    """
    sup = _mean_term(b.L_S, n_s)
    mic = _mean_term(weights.m * b.L_M, n_t)
    align = (weights.a_ins * b.L_A_ins + weights.a_img * b.L_A_img
             + weights.c_ins * b.L_C_ins + weights.c_img * b.L_C_img)
    return sup + mic + _mean_term(align, n_s + n_t)


def detection_loss(out: DetectorOutput) -> torch.Tensor:
    """Per-image sum of the RPN and ROI loss terms, shape (N,)."""
    return out.losses["rpn_cls"] + out.losses["rpn_box"] + out.losses["roi_cls"] + out.losses["roi_box"]


def mic_loss(per_image: torch.Tensor, pseudo: Sequence[PseudoLabelSet]) -> tuple[torch.Tensor, int]:
    """Masked-image consistency: detection losses of the student on masked
    images against teacher pseudo labels.  Unusable images contribute zero
    and are counted as skipped.  Returns (per-image losses, skipped count)."""
    if len(per_image) != len(pseudo):
        raise ValueError(f"{len(per_image)} losses for {len(pseudo)} pseudo-label sets")
    keep = torch.tensor([p.usable for p in pseudo], dtype=torch.bool)
    zeros = torch.zeros((), dtype=per_image.dtype)
    return torch.where(keep, per_image, zeros), int((~keep).sum())


def adversarial_losses(logits: DomainLogits, roi_batch_index: torch.Tensor,
                       domain: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image domain-classification BCE (target = 1).

    Image level sums the two pyramid-level discriminators, each averaged over
    locations; instance level averages over the image's pooled regions.
    """
    n = len(domain)
    d = domain.to(logits.image_low.dtype)
    low = F.binary_cross_entropy_with_logits(
        logits.image_low, d.view(n, 1, 1, 1).expand_as(logits.image_low), reduction="none")
    high = F.binary_cross_entropy_with_logits(
        logits.image_high, d.view(n, 1, 1, 1).expand_as(logits.image_high), reduction="none")
    img = low.flatten(1).mean(1) + high.flatten(1).mean(1)
    ins = F.binary_cross_entropy_with_logits(logits.instance, d[roi_batch_index], reduction="none")
    return img, _per_image_mean(ins, roi_batch_index, n)


def consistency_losses(logits: DomainLogits, roi_batch_index: torch.Tensor,
                       n_images: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Squared disagreement between discriminator logits, per image.

    Image level: gap between the two pyramid levels' mean logit.  Instance
    level: mean squared gap between each region's logit and the image-level
    mean logit.
    """
    z_low = logits.image_low.flatten(1).mean(1)
    z_high = logits.image_high.flatten(1).mean(1)
    img = (z_low - z_high) ** 2
    z_img = 0.5 * (z_low + z_high)
    gap = (logits.instance - z_img[roi_batch_index]) ** 2
    return img, _per_image_mean(gap, roi_batch_index, n_images)


def _per_image_mean(values, index, n):
    sums = values.new_zeros(n).index_add(0, index, values)
    counts = torch.bincount(index, minlength=n).clamp(min=1).to(values.dtype)
    return sums / counts
