"""Convolutional-recurrent traffic-flow forecasting with transfer and online learning."""

__version__ = "0.1.0"
