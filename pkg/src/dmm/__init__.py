"""Disparity-guided multispectral state-space detection components on a NumPy autodiff core."""

__version__ = "0.1.0"
