"""Console UI components for SOPSeg - training progress and rich report tables."""

from sopseg_console.console import (ConsoleObserver, render_ablation, render_provenance, render_report,
                                    render_review)

__version__ = "1.0.0"

__all__ = [
    "ConsoleObserver",
    "render_ablation",
    "render_provenance",
    "render_report",
    "render_review",
]
