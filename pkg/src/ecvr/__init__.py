"""Error-compensated variance-reduced distributed optimization, simulated in-process."""

from . import algorithms, compressors, dataset, harness, problem, rng

__all__ = ["algorithms", "compressors", "dataset", "harness", "problem", "rng"]
__version__ = "0.1.0"
