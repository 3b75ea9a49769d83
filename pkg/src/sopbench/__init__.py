"""Mobile device-control agent data pipeline and evaluation harness."""

__version__ = "0.1.0"
