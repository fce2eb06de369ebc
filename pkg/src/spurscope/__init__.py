"""Prediction-depth diagnostics for spurious features on a small numpy autodiff engine."""
__version__ = "0.1.0"
