"""Segmentation workbench: dual-branch encoder-decoder networks, dice-loss
training, and size-stratified mask evaluation on a minimal float64 autodiff
core."""

__version__ = "0.1.0"
