"""Live introspection of long-running processes via map-reduce stream queries."""

__version__ = "0.1.0"
