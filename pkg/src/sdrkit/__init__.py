"""Linear and neural tools for shared-information dimensionality reduction."""

from . import datagen, harness, ibgraph, lindr, metrics, miest, nncore

__version__ = "0.1.0"

__all__ = ["datagen", "harness", "ibgraph", "lindr", "metrics", "miest", "nncore"]
