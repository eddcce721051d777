"""Metric-warped sampling, directional topology refinement and multi-task
losses for underwater camouflaged-object segmentation, on a small numpy
autodiff engine."""

__version__ = "0.1.0"
