"""Location-aware semi-supervised domain adaptation for smoke detection."""

__version__ = "0.1.0"
