"""
Simulate Command Implementation
Function-based runner that emits pretraining sets as JSON Lines.
"""

import os

from app_config import ExperimentConfig
from cli_components import EXIT_OK, render_status
from modules.harness import experiment_generator
from modules.persistence import ArtifactStore


# Emit one pretraining set per n in the grid
def run_simulate_command(cfg: ExperimentConfig) -> int:
    """Draw Γ sequences for every n and write them to <out_dir>/pretrain_n<n>.jsonl."""
    store = ArtifactStore(overwrite=cfg.overwrite)
    generator = experiment_generator(cfg)
    for index, n in enumerate(cfg.n_grid):
        pset = generator.pretrain_set(n, cfg.gamma, seed=cfg.seed + index)
        path = store.write_pretrain_set(pset, os.path.join(cfg.out_dir, f"pretrain_n{n}.jsonl"))
        render_status(f"Wrote {pset.gamma} sequences of length {n} to {path} (seed {pset.seed})")
    return EXIT_OK
