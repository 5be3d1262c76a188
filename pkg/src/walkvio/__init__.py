"""Sliding-window visual-inertial odometry with leg-kinematic constraints weighted by feature motion."""

__version__ = "0.1.0"
