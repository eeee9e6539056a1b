"""Fractional factorial analysis of compiler optimisation flags for time and energy."""

__version__ = "0.1.0"
