"""Robust model-based imitation: neural-ODE dynamics, NDI tracking control,
noise-injection refinement and a CVAE reference generator, with analytic
plants for checking the learned pieces against closed-form laws."""

__version__ = "0.1.0"
