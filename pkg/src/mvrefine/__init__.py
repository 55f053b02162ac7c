"""Multi-view feature-metric 6D object pose refinement."""

__version__ = "0.1.0"
