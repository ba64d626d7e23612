"""3D-context-enhanced region-based lesion detection at desk scale."""

__version__ = "0.1.0"
