"""Decayed identity shortcuts for masked autoencoders, classifiers and diffusion models."""
from .schedules import AlphaSchedule, advise_alpha_min, effective_alpha, make_schedule

__all__ = ["AlphaSchedule", "advise_alpha_min", "effective_alpha", "make_schedule"]
__version__ = "0.1.0"
