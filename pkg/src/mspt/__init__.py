"""Multi-scale patch transformer for point-cloud and grid field prediction."""

__version__ = "0.1.0"
