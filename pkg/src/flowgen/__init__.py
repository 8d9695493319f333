"""Pocket-conditioned GFlowNet engine for fragment-graph molecules."""

__version__ = "0.1.0"
