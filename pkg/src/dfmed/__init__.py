"""Dual-flow medical dialogue modeling: entity-graph flow, act flow, and flow-guided generation."""

__version__ = "0.1.0"
