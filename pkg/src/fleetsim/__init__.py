"""Discrete-event simulator of a cloud LLM serving fleet: gateway routing,
prefix and pooled KV caching, autoscaling, and cost-aware GPU allocation."""

__version__ = "0.1.0"
