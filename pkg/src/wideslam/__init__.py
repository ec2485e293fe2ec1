"""Uncertainty-aware wide field-of-view SLAM back end."""
__version__ = "0.1.0"
