"""Quasi-Toplitz KAM reduction engine for quasi-periodically forced Schrodinger operators on Z^2."""

__version__ = "0.1.0"
