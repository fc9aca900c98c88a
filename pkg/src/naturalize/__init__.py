"""Naturalize CG facial images against black-box differential-histogram detectors."""

__version__ = "0.1.0"
