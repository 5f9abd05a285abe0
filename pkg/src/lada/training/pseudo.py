"""Dual-threshold pseudo-label filtering with reliable-background mining."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from lada.errors import ConfigError
from lada.metrics import Detection


@dataclass(frozen=True)
class PseudoLabelSet:
    image_id: str
    positives: tuple[Detection, ...]
    is_reliable_background: bool
    usable: bool
    n_discarded: int = 0

    def targets(self, dtype=torch.float32) -> dict:
        """Detector targets: pseudo boxes, or none for a reliable background."""
        if not self.positives:
            return {"boxes": torch.zeros((0, 4), dtype=dtype), "labels": torch.zeros(0, dtype=torch.long)}
        return {
            "boxes": torch.tensor([d.box.corners() for d in self.positives], dtype=dtype),
            "labels": torch.tensor([d.box.class_id for d in self.positives], dtype=torch.long),
        }


def filter_pseudo_labels(
    dets: Sequence[Detection],
    tau_u: float = 0.8,
    tau_l: float = 0.05,
    image_id: str | None = None,
    use_background: bool = True,
) -> PseudoLabelSet:
    """Keep detections scoring above ``tau_u``.  An image where nothing scores
    above ``tau_l`` (including no detections at all) is a reliable background.
    Detections in ``(tau_l, tau_u]`` are dropped; if they are all the image
    has, the image is unusable for this step."""
    if not tau_l < tau_u:
        raise ConfigError(f"tau_l must be below tau_u, got {tau_l} >= {tau_u}")
    positives = tuple(d for d in dets if d.score > tau_u)
    background = use_background and all(d.score <= tau_l for d in dets)
    if image_id is None:
        image_id = dets[0].image_id if dets else ""
    return PseudoLabelSet(
        image_id=image_id,
        positives=positives,
        is_reliable_background=background,
        usable=bool(positives) or background,
        n_discarded=sum(tau_l < d.score <= tau_u for d in dets),
    )
