"""Hierarchical detection heads, hierarchy-aware loss and hierarchical metrics."""

from .taxonomy import Taxonomy, build_taxonomy, example_taxonomy, parse_taxonomy

__version__ = "0.1.0"

__all__ = ["Taxonomy", "build_taxonomy", "example_taxonomy", "parse_taxonomy", "__version__"]
