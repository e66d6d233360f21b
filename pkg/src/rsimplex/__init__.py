"""Restart-tolerant Simplex control: base-controller synthesis and simulation."""

__version__ = "0.1.0"

EPS_GEOM = 1e-9
