"""Toolkit for sequence-aware guidance-model training on phantom-heart scans."""

__version__ = "0.1.0"

from echoguide.pose import Action, Pose  # noqa: F401
