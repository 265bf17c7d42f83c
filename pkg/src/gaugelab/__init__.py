"""Radiative transport albedo operators and gauge-class stability experiments."""
__version__ = "0.1.0"
