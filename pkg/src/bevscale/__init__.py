"""Desk-scale multi-modal BEV perception stack with a compute-scaling harness."""

__version__ = "0.1.0"
