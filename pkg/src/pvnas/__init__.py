"""Multi-objective neural architecture search for photovoltaic power forecasting."""

from .dataset import TaskKind, TimeSeriesFrame
from .search_space import Genotype, SearchSpace, TaskSpec, assemble, decode, encode
from .searcher import SearchConfig, mobananas_search, non_dominated_sort

__all__ = [
    "Genotype", "SearchConfig", "SearchSpace", "TaskKind", "TaskSpec", "TimeSeriesFrame",
    "assemble", "decode", "encode", "mobananas_search", "non_dominated_sort",
]
__version__ = "0.1.0"
