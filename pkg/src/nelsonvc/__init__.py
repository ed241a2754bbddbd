"""Variable-coefficient Nelson model with UV cutoff: dressing and counterterm numerics."""

__version__ = "0.1.0"
