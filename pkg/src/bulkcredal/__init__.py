"""Bulk-calibrated linear-vacuous ambiguity sets for robust decision making."""
__version__ = "0.1.0"
