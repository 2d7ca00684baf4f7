"""Simulation and recovery of 100BASE-TX traffic leaked through a backscatter implant."""

__version__ = "0.1.0"
