"""Joint music source separation and pitch estimation with dynamic sample weights."""

__version__ = "0.1.0"
