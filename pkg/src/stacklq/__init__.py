"""Linear-quadratic leader-follower games with overlapping information."""

__version__ = "0.1.0"
