"""Two-stage skill recommendation: shortlisters, rerankers, relabeling, simulation."""

__version__ = "0.1.0"
