"""Hybrid GAN-CNN tropical cyclone intensity estimation from IR1 and WV imagery."""

__version__ = "0.1.0"
