"""Slice-to-volume pose regression and motion-compensated reconstruction toolkit."""

__version__ = "0.1.0"
