"""
hyperplace
Hierarchical hyperbolic descriptors for panoramic place retrieval
"""

from loguru import logger

from hyperplace.errors import ConfigurationError, FormatError, HyperplaceError, InvalidInputError
from hyperplace.hierarchy import DescriptorTree, FeatureGrid, PoolingSpec, build_tree, embed_query, window_layout
from hyperplace.hypgeo import BallConfig, BallPoint, PoincareBall
from hyperplace.index import DatabaseIndex, Preset, RetrievalConfig, build_index, exhaustive_search, retrieve
from hyperplace.storage import load_index, persist_index

logger.disable("hyperplace")

__all__ = [
    "BallConfig",
    "BallPoint",
    "ConfigurationError",
    "DatabaseIndex",
    "DescriptorTree",
    "FeatureGrid",
    "FormatError",
    "HyperplaceError",
    "InvalidInputError",
    "PoincareBall",
    "PoolingSpec",
    "Preset",
    "RetrievalConfig",
    "build_index",
    "build_tree",
    "embed_query",
    "exhaustive_search",
    "load_index",
    "main",
    "persist_index",
    "retrieve",
    "window_layout",
]


def main() -> None:
    from hyperplace.cli import main as cli_main

    raise SystemExit(cli_main())
