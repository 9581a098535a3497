"""Star-graph sequential recommendation with its analytical probes."""

__version__ = "0.1.0"
