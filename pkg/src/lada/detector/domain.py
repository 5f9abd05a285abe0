"""Gradient reversal and the three domain discriminators."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.coefficient * grad_output, None


def reverse_gradient(x: torch.Tensor, coefficient: float) -> torch.Tensor:
    """Identity forward; backward multiplies the gradient by ``-coefficient``."""
    return _ReverseGrad.apply(x, coefficient)


class GradientReversal(nn.Module):
    def __init__(self, coefficient: float = 1.0):
        super().__init__()
        self.coefficient = coefficient

    def forward(self, x):
        return reverse_gradient(x, self.coefficient)

    def extra_repr(self):
        return f"coefficient={self.coefficient}"


class ImageDiscriminator(nn.Module):
    """Per-location source/target logit over a feature map."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1), nn.ReLU(), nn.Conv2d(hidden, 1, 1))

    def forward(self, x):
        return self.net(x)


class InstanceDiscriminator(nn.Module):
    def __init__(self, in_features: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_features, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, x):
        return self.net(x.flatten(1)).squeeze(1)


@dataclass
class DomainLogits:
    """Logits (positive means target) at the three alignment levels."""

    image_low: torch.Tensor   # (N, 1, H0, W0), finest pyramid level
    image_high: torch.Tensor  # (N, 1, Hk, Wk), coarsest pyramid level
    instance: torch.Tensor    # (R,), one per pooled region


class DomainDiscriminators(nn.Module):
    def __init__(self, channels: int, pooled_features: int, hidden: int):
        super().__init__()
        self.image_low = ImageDiscriminator(channels, hidden)
        self.image_high = ImageDiscriminator(channels, hidden)
        self.instance = InstanceDiscriminator(pooled_features, hidden)

    def forward(self, features, roi_features, coefficient: float) -> DomainLogits:
        return DomainLogits(
            image_low=self.image_low(reverse_gradient(features[0], coefficient)),
            image_high=self.image_high(reverse_gradient(features[-1], coefficient)),
            instance=self.instance(reverse_gradient(roi_features, coefficient)),
        )
