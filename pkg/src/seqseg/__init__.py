"""Interactive point-based segmentation with a bi-directional sequential-patch ConvRNN."""

__version__ = "0.1.0"
