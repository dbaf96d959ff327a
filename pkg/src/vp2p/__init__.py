"""Geometric, matching, loss and probabilistic-PnP core for image-to-point-cloud registration."""

__version__ = "0.1.0"
