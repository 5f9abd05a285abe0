"""Convolution with appended normalized x/y coordinate channels."""

from __future__ import annotations

import torch
from torch import nn

from lada.errors import ConfigError


def make_coord_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Return a ``(2, height, width)`` tensor of x and y coordinates in [-1, 1].

    A dimension of size 1 maps to 0 rather than dividing by zero.
    """
    if height < 1 or width < 1:
        raise ConfigError(f"grid dimensions must be positive, got {height}x{width}")

    def axis(n):
        if n == 1:
            return torch.zeros(1, dtype=dtype, device=device)
        return 2.0 * torch.arange(n, dtype=dtype, device=device) / (n - 1) - 1.0

    ys, xs = torch.meshgrid(axis(height), axis(width), indexing="ij")
    return torch.stack([xs, ys])


class CoordConv2d(nn.Module):
    """``nn.Conv2d`` whose input gains two coordinate channels.

    With ``use_coords`` off the extra channels are zeros, which keeps the
    parameter set identical to the coordinate-aware layer (used for ablations).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, **kwargs):
        super().__init__()
        self.conv = nn.Conv2d(in_channels + 2, out_channels, kernel_size, **kwargs)
        self.use_coords = True
        self._grid_cache: dict = {}

    def coord_channels(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        key = (h, w, x.dtype, x.device)
        grid = self._grid_cache.get(key)
        if grid is None:
            grid = make_coord_grid(h, w, dtype=x.dtype, device=x.device)
            self._grid_cache[key] = grid
        if not self.use_coords:
            grid = torch.zeros_like(grid)
        return grid.unsqueeze(0).expand(n, -1, -1, -1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([x, self.coord_channels(x)], dim=1))
