"""Simulation and inference toolkit for a shaken-lattice vector atom accelerometer."""

__version__ = "0.1.0"
