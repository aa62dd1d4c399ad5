"""Test-time adaptation guided by a synthesized pseudo-source feature bank."""

__version__ = "0.1.0"
