"""Time-optimal trap trajectories for acoustic levitation displays."""

__version__ = "0.1.0"
