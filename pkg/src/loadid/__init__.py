"""Balanced dataset construction and steady-state differential event recognition
for non-intrusive appliance load monitoring."""

__version__ = "0.1.0"
