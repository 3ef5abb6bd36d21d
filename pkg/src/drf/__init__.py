"""Pose-based scoliosis screening with skeleton maps and postural asymmetry vectors."""

__version__ = "0.1.0"
