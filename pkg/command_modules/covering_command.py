"""
Covering Bound Command Implementation
Function-based runner for the covering-number and ERM tail tables.
"""

from app_config import ExperimentConfig
from cli_components import EXIT_OK, render_table
from modules.harness import experiment_harness


def run_covering_command(cfg: ExperimentConfig) -> int:
    """Tabulate the bounds over the n and Γ grids."""
    frame = experiment_harness.run_covering_table(cfg)
    render_table(frame, f"Covering bound (C = {cfg.block_constant})")
    return EXIT_OK
