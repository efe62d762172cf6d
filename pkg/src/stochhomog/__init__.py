"""Two-stage stochastic homogenization of 2D diffusion with random oscillating coefficients."""

__version__ = "0.1.0"
