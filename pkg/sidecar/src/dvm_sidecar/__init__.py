"""Feature sidecar: turns projected view images into DVFM per-pixel feature maps."""

from .extract import BACKBONES, ExtractorConfig, ExtractorError, extract, selfcheck

__version__ = "0.1.0"
