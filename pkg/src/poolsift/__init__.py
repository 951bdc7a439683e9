"""Deterministic subset selection for instruction-tuning data pools."""

__version__ = "0.1.0"
