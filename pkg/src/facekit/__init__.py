"""facekit: scans -> two-layer face representation -> bilinear model -> fit -> rig."""

__version__ = "0.1.0"
