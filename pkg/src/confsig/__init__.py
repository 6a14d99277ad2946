"""Signature-based misconfiguration detection for network device configs."""

__version__ = "0.1.0"
