"""Spatio-temporal attention model for tactile texture recognition."""

__version__ = "0.1.0"

from stam.estimator import STAMClassifier  # noqa: E402

__all__ = ["STAMClassifier", "__version__"]
