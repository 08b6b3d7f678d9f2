from .config import ConfigError, ExperimentConfig, OptimizerName, StopConfig, DatasetConfig
from .harness import (
    RunRecord,
    TableRow,
    aggregate,
    compare,
    emit_curves,
    read_records,
    run_experiment,
)
from .tables import TableFormat, render_table
from .cli import main

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "ExperimentConfig",
    "OptimizerName",
    "RunRecord",
    "StopConfig",
    "TableFormat",
    "TableRow",
    "aggregate",
    "compare",
    "emit_curves",
    "main",
    "read_records",
    "render_table",
    "run_experiment",
]
