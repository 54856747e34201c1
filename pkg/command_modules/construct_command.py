"""
Construct Command Implementation
Class-based approach for building and saving the local polynomial transformer.
"""

import os

from app_config import ExperimentConfig
from cli_components import EXIT_OK, render_status, render_summary
from modules.construction import (BuildReport, ConstructionConfig, locpol_transformer_builder,
                                  make_construction_config)
from modules.harness import experiment_generator, keyed_rng
from modules.persistence import ArtifactStore
from modules.transformer import TransformerParams


## Builds the explicit transformer for each n in the grid
class ConstructCommand:
    """Runs construction and writes one checkpoint per prompt length."""

    def __init__(self, cfg: ExperimentConfig, store: ArtifactStore = None):
        self.cfg = cfg
        self.store = store or ArtifactStore(overwrite=cfg.overwrite)

    def run(self) -> int:
        for index, n in enumerate(self.cfg.n_grid):
            construction = self.resolve(n, index)
            params, report = locpol_transformer_builder.build(construction)
            path = self._save(construction, params, report)
            render_summary({k: v for k, v in report.to_dict().items() if k != "notes"},
                           f"🔧 Construction at n={n}")
            for note in report.notes:
                render_status(note, "warning")
            render_status(f"Saved checkpoint to {path}")
        return EXIT_OK

    # Calibrate the spectrum on prompts keyed by (seed, 1, grid index)
    def resolve(self, n: int, index: int) -> ConstructionConfig:
        cfg = self.cfg
        generator = experiment_generator(cfg)
        calibration = [generator.prompt(n, keyed_rng(cfg.seed, 1, index, i)) for i in range(cfg.calibration_prompts)]
        return make_construction_config(n, cfg.d, cfg.alpha, cfg.M, calibration_prompts=calibration,
                                        T=cfg.T, L0=cfg.L0, eta=cfg.eta, T_cap=cfg.T_cap)

    def _save(self, construction: ConstructionConfig, params: TransformerParams, report: BuildReport) -> str:
        path = os.path.join(self.cfg.out_dir, f"construct_n{construction.n}.lptf")
        provenance = {"seed": self.cfg.seed, "config": self.cfg.to_dict(),
                      "construction": construction.to_dict(), "build_report": report.to_dict()}
        return self.store.save_checkpoint(params, path, provenance)
