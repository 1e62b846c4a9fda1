"""Two-stream spatial-temporal self-attention network for gridded flow
prediction, built on a self-contained reverse-mode autodiff core."""

__version__ = "0.1.0"
