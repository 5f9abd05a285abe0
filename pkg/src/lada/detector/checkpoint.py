"""Self-describing checkpoints: safetensors archive with a JSON header."""

from __future__ import annotations

import json
from pathlib import Path

from safetensors.torch import load_file, save_file

from lada.detector.model import DetectorConfig, LADADetector


def save_checkpoint(model: LADADetector, path: str | Path, extra: dict | None = None) -> None:
    header = {"architecture": "lada-two-stage", "detector": model.cfg.to_dict()}
    if extra:
        header["extra"] = extra
    tensors = {k: v.detach().contiguous() for k, v in model.state_dict().items()}
    save_file(tensors, str(path), metadata={"lada": json.dumps(header)})


def read_header(path: str | Path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        return json.loads(fh.metadata()["lada"])


def load_checkpoint(path: str | Path) -> LADADetector:
    header = read_header(path)
    model = LADADetector(DetectorConfig(**header["detector"]))
    state = load_file(str(path))
    model.load_state_dict(state)
    model.to(next(iter(state.values())).dtype)
    return model
