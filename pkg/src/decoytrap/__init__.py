"""Decoy-file ransomware early detection: trap selection, monitoring and evaluation."""

__version__ = "0.1.0"
