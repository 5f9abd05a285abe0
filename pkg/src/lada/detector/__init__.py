from lada.detector.checkpoint import load_checkpoint, read_header, save_checkpoint
from lada.detector.coordconv import CoordConv2d, make_coord_grid
from lada.detector.domain import DomainLogits, GradientReversal, reverse_gradient
from lada.detector.model import DetectorConfig, DetectorOutput, LADADetector, toy_config

__all__ = [
    "CoordConv2d", "DetectorConfig", "DetectorOutput", "DomainLogits", "GradientReversal",
    "LADADetector", "load_checkpoint", "make_coord_grid", "read_header", "reverse_gradient",
    "save_checkpoint", "toy_config",
]
