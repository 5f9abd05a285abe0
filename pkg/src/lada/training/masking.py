"""Random block masks for masked-image consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from lada.errors import ConfigError, ShapeError
from lada.protocol import round_half_up


@dataclass(frozen=True)
class BlockMask:
    grid: np.ndarray  # (ceil(H / block), ceil(W / block)) booleans, True = masked
    block: int
    height: int
    width: int

    @property
    def n_blocks(self) -> int:
        return self.grid.size

    @property
    def n_masked(self) -> int:
        return int(self.grid.sum())

    def pixel_mask(self) -> np.ndarray:
        """(H, W) booleans; edge blocks are cropped to the image."""
        full = np.repeat(np.repeat(self.grid, self.block, axis=0), self.block, axis=1)
        return full[: self.height, : self.width]


def generate_mask(height: int, width: int, block: int = 32, ratio: float = 0.5, seed=0) -> BlockMask:
    """Mask exactly ``round(ratio * n_blocks)`` blocks chosen without replacement."""
    if block < 1:
        raise ConfigError(f"block must be >= 1, got {block}")
    if not 0 <= ratio <= 1:
        raise ConfigError(f"ratio must be in [0, 1], got {ratio}")
    gh, gw = -(-height // block), -(-width // block)
    n = gh * gw
    k = round_half_up(ratio * n)
    grid = np.zeros(n, dtype=bool)
    grid[np.random.default_rng(seed).choice(n, size=k, replace=False)] = True
    return BlockMask(grid.reshape(gh, gw), block, height, width)


def apply_mask(image, mask: BlockMask):
    """Zero the masked pixels of a ``(..., H, W)`` array or tensor."""
    if tuple(image.shape[-2:]) != (mask.height, mask.width):
        raise ShapeError(f"mask is {mask.height}x{mask.width}, image is {tuple(image.shape[-2:])}")
    pm = mask.pixel_mask()
    if isinstance(image, torch.Tensor):
        pm = torch.from_numpy(pm).to(image.device)
        return torch.where(pm, torch.zeros((), dtype=image.dtype), image)
    return np.where(pm, np.zeros((), dtype=image.dtype), image)
