"""Model-free detection for a simulated chemical (pH) communication link."""

__version__ = "0.1.0"
