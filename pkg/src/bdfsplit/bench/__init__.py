"""Benchmark harness: configs, runs, plot data and table checks."""

from .config import ConfigError, RunConfig, load_config
from .export import export_plotdata
from .runner import run_benchmark
from .verify import verify_tables

__all__ = ["ConfigError", "RunConfig", "load_config", "run_benchmark", "export_plotdata",
           "verify_tables"]
