"""In-network aggregation protocol simulator and fixed-point GLM trainer."""

__version__ = "0.1.0"
