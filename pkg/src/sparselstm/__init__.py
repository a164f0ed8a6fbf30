"""Sparse spatio-temporal 3D object detection with a sparse conv LSTM."""

__version__ = "0.1.0"
