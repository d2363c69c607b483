"""Offline preference-based RL lab: a Bradley-Terry reward ensemble trained
from a few labeled segment pairs plus screened pseudo-labeled pairs generated
by a learned dynamics model."""

__version__ = "0.1.0"
