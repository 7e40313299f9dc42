"""Learning-based battery management for frequency-regulation markets."""

__version__ = "0.1.0"
