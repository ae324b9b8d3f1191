"""Command-line tools for SOPSeg."""

__version__ = "1.0.0"
