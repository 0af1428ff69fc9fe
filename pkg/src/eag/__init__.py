"""Energy-based autoregressive generation of neural spike trains."""

__version__ = "0.1.0"
