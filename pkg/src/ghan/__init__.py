"""Geometric hypergraph attention network for news-driven stock movement prediction."""

__version__ = "0.1.0"
