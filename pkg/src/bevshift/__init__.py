"""Receding-horizon speed and gearshift co-optimization for battery-electric vehicles."""

__version__ = "0.1.0"
