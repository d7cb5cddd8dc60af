"""Acceleration-as-a-Service: remote compute offload with a catastrophe-risk reference kernel."""

__version__ = "0.1.0"
