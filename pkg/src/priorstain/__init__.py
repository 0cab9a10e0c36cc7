"""Soft nuclei-prior conditioning for paired brightfield IHC to multiplex-IF translation."""

__version__ = "0.1.0"
