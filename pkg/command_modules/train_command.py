"""
Train Command Implementation
Class-based approach for empirical risk minimization over the transformer class,
with optional warm start from the explicit construction.
"""

import logging
import math
import os
from typing import Tuple

import pandas as pd

from app_config import ExperimentConfig
from cli_components import EXIT_OK, render_status, render_summary, render_table
from command_modules.construct_command import ConstructCommand
from modules.construction import ConstructionConfig, locpol_transformer_builder
from modules.errors import TrainingDivergenceError
from modules.harness import experiment_generator, experiment_specs, keyed_rng
from modules.locpol import LocPolPredictor
from modules.persistence import ArtifactStore
from modules.training import TrainConfig, TrainResult, risk_trainer
from modules.transformer import ArchSpec, TransformerParams, TransformerPredictor

logger = logging.getLogger(__name__)

COLD_INIT_SCALE = 0.01


## ERM at n = n_grid[0] on Γ = cfg.gamma sequences
class TrainCommand:
    """
    Trains, checkpoints and decomposes the risk of the trained transformer.
    """

    def __init__(self, cfg: ExperimentConfig, store: ArtifactStore = None):
        self.cfg = cfg
        self.store = store or ArtifactStore(overwrite=cfg.overwrite)
        self.n = cfg.n_grid[0]

    def run(self) -> int:
        cfg = self.cfg
        construction, constructed = self._construct()
        arch, init = self._architecture(construction, constructed)
        pset = experiment_generator(cfg).pretrain_set(self.n, cfg.gamma, seed=cfg.seed)
        train_cfg = TrainConfig(optimizer=cfg.optimizer, step_size=cfg.step_size,
                                batch_size=min(cfg.batch_size, cfg.gamma), epochs=cfg.epochs, seed=cfg.seed,
                                init_scale=0.0 if init is not None else COLD_INIT_SCALE)
        render_status(f"Training L={arch.L} blocks on Γ={cfg.gamma} sequences of length {self.n} "
                      f"({'warm' if init is not None else 'cold'} start)", "start")
        try:
            result = risk_trainer.train_erm(arch, pset, train_cfg, init=init)
        except TrainingDivergenceError as e:
            self._write_curve(pd.DataFrame({"epoch": range(len(e.loss_history)), "empirical_risk": e.loss_history}))
            raise

        self._write_curve(result.curve_frame())
        self._save(result, construction)
        render_summary(result.summary(), "📊 Training")
        render_table(self._decompose(result, construction, constructed), "Risk decomposition")
        return EXIT_OK

    def _construct(self) -> Tuple[ConstructionConfig, TransformerParams]:
        construction = ConstructCommand(self.cfg, self.store).resolve(self.n, 0)
        params, _ = locpol_transformer_builder.build(construction)
        return construction, params

    # Warm start reuses the constructed architecture; cold start sizes it by C log(en) blocks
    def _architecture(self, construction: ConstructionConfig, constructed: TransformerParams):
        if self.cfg.warm_start:
            return constructed.arch, constructed
        C, p, D = self.cfg.block_constant, construction.p, construction.D
        arch = ArchSpec(d_e=construction.layout.d_e, d_ffn=6 * (D + 1) * (14 + p),
                        L=int(math.ceil(C * math.log(math.e * self.n))), B=C * self.n ** 2,
                        d=self.cfg.d, M=self.cfg.M)
        return arch, None

    def _write_curve(self, frame: pd.DataFrame):
        path = os.path.join(self.cfg.out_dir, f"train_curve.{self.cfg.output_format}")
        self.store.write_frame(frame, path, self.cfg.output_format, metadata={"seed": self.cfg.seed})

    def _save(self, result: TrainResult, construction: ConstructionConfig) -> str:
        path = os.path.join(self.cfg.out_dir, f"train_n{self.n}.lptf")
        provenance = {"seed": self.cfg.seed, "config": self.cfg.to_dict(), "warm_start": self.cfg.warm_start,
                      "construction": construction.to_dict(), "training": result.summary()}
        return self.store.save_checkpoint(result.params, path, provenance)

    # Fresh-task risks of f_hat, f_TF and f_LocPol on shared draws
    def _decompose(self, result: TrainResult, construction: ConstructionConfig,
                   constructed: TransformerParams) -> pd.DataFrame:
        cfg = self.cfg
        locpol = LocPolPredictor(alpha=cfg.alpha, M=cfg.M, d=cfg.d, h=construction.h, p=construction.p)
        frame = risk_trainer.risk_decomposition_report(TransformerPredictor(result.params),
                                                       TransformerPredictor(constructed), locpol,
                                                       experiment_specs(cfg), self.n, cfg.tasks,
                                                       keyed_rng(cfg.seed, 4), arch=result.params.arch,
                                                       gamma=cfg.gamma, family=cfg.task_family)
        path = os.path.join(cfg.out_dir, f"train_risk.{cfg.output_format}")
        self.store.write_frame(frame, path, cfg.output_format, metadata={"seed": cfg.seed, "n": self.n})
        return frame
