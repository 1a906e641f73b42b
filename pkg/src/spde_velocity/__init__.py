"""Nonparametric estimation of the velocity field in a stochastic convection-diffusion equation."""

__version__ = "0.1.0"
