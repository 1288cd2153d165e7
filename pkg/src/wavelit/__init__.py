"""Wavelet-tokenized linear-attention neural PDE surrogates on a small numpy autodiff engine."""

__version__ = "0.1.0"
