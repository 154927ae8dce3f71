"""Minimal query engine standing in for an embedded analytical database."""

from .executor import (
    DEFAULT_BATCH_ROWS,
    BatchReader,
    BoundQuery,
    BufferedReader,
    ReaderMap,
    bind,
    drain,
    execute,
)
from .sql import ParsedQuery, Predicate, parse_query
from .tcf import TcfDataset, TcfWriter, open_dataset, write_dataset

__all__ = [
    "DEFAULT_BATCH_ROWS",
    "BatchReader",
    "BoundQuery",
    "BufferedReader",
    "ParsedQuery",
    "Predicate",
    "ReaderMap",
    "TcfDataset",
    "TcfWriter",
    "bind",
    "drain",
    "execute",
    "open_dataset",
    "parse_query",
    "write_dataset",
]
