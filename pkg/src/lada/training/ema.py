from __future__ import annotations

from collections.abc import Mapping

import torch
from torch import nn

from lada.errors import ConfigError, StructureError


def _named(params) -> dict[str, torch.Tensor]:
    if isinstance(params, nn.Module):
        return dict(params.named_parameters())
    if isinstance(params, Mapping):
        return dict(params)
    raise TypeError(f"expected a module or a mapping of tensors, got {type(params).__name__}")


@torch.no_grad()
def ema_update(teacher, student, decay: float):
    """teacher <- decay * teacher + (1 - decay) * student, in place.

    ``decay`` is the fraction of the teacher retained.  Accepts modules or
    name -> tensor mappings with identical names and shapes.
    """
    if not 0 <= decay <= 1:
        raise ConfigError(f"decay must be in [0, 1], got {decay}")
    t_params, s_params = _named(teacher), _named(student)
    if t_params.keys() != s_params.keys():
        missing = sorted(t_params.keys() ^ s_params.keys())
        raise StructureError(f"parameter names differ: {missing[:5]}")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise StructureError(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        t.mul_(decay).add_(s, alpha=1.0 - decay)
    return teacher
