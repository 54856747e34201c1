"""
training.py

Provides empirical and Monte Carlo population risk, ERM training of linear-attention
transformers with manual reverse-mode gradients, and finite-difference gradient checks
using a class-based approach.
"""
from typing import List, Dict, Optional, Any, Tuple, Callable, Sequence
from dataclasses import dataclass, asdict
import logging
import math

import numpy as np
import pandas as pd
from tqdm import tqdm

from modules.datagen import CovariateSpec, HolderSpec, NoiseSpec, PretrainSet, Prompt, PromptGenerator
from modules.errors import TrainingDivergenceError
from modules.transformer import (ArchSpec, BlockParams, ClassDims, TransformerParams,
                                 bound_calculator, embed)

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "gradient")
SCHEDULES = ("constant", "inverse_sqrt")
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_EPOCHS = 3
RISK_COLUMNS = ["quantity", "value", "stderr"]

Predictor = Callable[[Prompt], float]
Specs = Tuple[HolderSpec, CovariateSpec, NoiseSpec]


@dataclass
class RiskReport:
    value: float
    stderr: float
    n_eval: int
    excess_over_sigma2: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


## Optimizer settings for ERM
@dataclass
class TrainConfig:
    """
    ERM optimizer settings; B defaults to the architecture's bound.
    """
    optimizer: str = "adam"
    step_size: float = 1e-3
    schedule: str = "constant"
    batch_size: int = 32
    epochs: int = 200
    B: Optional[float] = None
    early_stop_tol: float = 0.0
    patience: int = 20
    seed: int = 0
    init_scale: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    progress: bool = True

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Unsupported optimizer: {self.optimizer}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"Unsupported step schedule: {self.schedule}")
        if not self.step_size > 0:
            raise ValueError(f"Step size must be positive, got {self.step_size}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError(f"Batch size must be positive and epochs nonnegative, got {self.batch_size}, {self.epochs}")

    # Step size at update count t
    def step_at(self, t: int) -> float:
        if self.schedule == "inverse_sqrt":
            return self.step_size / math.sqrt(1.0 + t)
        return self.step_size


@dataclass
class TrainResult:
    params: TransformerParams
    loss_history: List[float]
    best_history: List[float]
    best_epoch: int
    stopped_early: bool = False

    # Per-epoch loss curve
    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"epoch": np.arange(len(self.loss_history)),
                             "empirical_risk": self.loss_history,
                             "best_so_far": self.best_history})

    def summary(self) -> Dict[str, Any]:
        return {
            "epochs_run": len(self.loss_history) - 1,
            "initial_risk": self.loss_history[0],
            "final_risk": self.loss_history[-1],
            "best_risk": self.best_history[-1],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "max_abs_param": self.params.max_abs_param(),
        }


@dataclass
class GradientCheckReport:
    coordinates: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    relative_errors: np.ndarray
    resampled: int

    @property
    def max_relative_error(self) -> float:
        return float(np.max(self.relative_errors)) if self.relative_errors.size else 0.0


@dataclass
class SharedRiskResult:
    reports: Dict[str, RiskReport]
    losses: pd.DataFrame
    sigma2: float


## Reference predictors for risk oracles
class OraclePredictor:
    """Predicts m(x_{n+1}) from the prompt's own task."""

    def __call__(self, prompt: Prompt) -> float:
        if prompt.task is None:
            raise ValueError("Oracle prediction needs prompts that carry their task")
        return float(prompt.task(prompt.query))


class ConstantPredictor:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, prompt: Prompt) -> float:
        return self.value


# Predictions for a list of prompts, batched when the predictor supports it
def predict_all(f: Predictor, prompts: Sequence[Prompt]) -> np.ndarray:
    if hasattr(f, "predict_batch") and len({p.n for p in prompts}) == 1:
        return np.asarray(f.predict_batch(list(prompts)), dtype=np.float64)
    return np.array([f(p) for p in prompts], dtype=np.float64)


def _responses(prompts: Sequence[Prompt]) -> np.ndarray:
    if any(p.query_response is None for p in prompts):
        raise ValueError("Every prompt needs a held-out query response")
    return np.array([p.query_response for p in prompts], dtype=np.float64)


def _jackknife_stderr(values: np.ndarray) -> float:
    # Leave-one-out means; equals the classical standard error of the mean
    count = values.size
    if count < 2:
        return float("nan")
    loo = (values.sum() - values) / (count - 1)
    return float(math.sqrt((count - 1) / count * np.sum((loo - loo.mean()) ** 2)))


## Batched forward and reverse-mode pass of the transformer loss
class TransformerGradient:
    """
    Computes the mean squared query error of a batch and its gradient with respect to every block tensor.
    """

    def __init__(self, arch: ArchSpec):
        self.arch = arch

    # Stack prompts into a (b, n+1, d_e) tensor and their responses
    def batch(self, prompts: Sequence[Prompt]) -> Tuple[np.ndarray, np.ndarray]:
        return np.stack([embed(p, self.arch.d_e) for p in prompts]), _responses(prompts)

    # Forward pass keeping only each block's input
    def forward(self, params: TransformerParams, Z: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        inputs = []
        for block in params.blocks:
            inputs.append(Z)
            Z = self._block(Z, block)[-1]
        return Z, inputs

    def _block(self, Z: np.ndarray, block: BlockParams) -> Tuple[np.ndarray, ...]:
        A, Bk, Cv = Z @ block.Q, Z @ block.K, Z @ block.V
        S = np.swapaxes(Bk, -1, -2) @ Cv
        Z_mid = Z + A @ S
        H = Z_mid @ block.W1.T + block.b1
        R = np.maximum(H, 0.0)
        return A, Bk, Cv, S, Z_mid, H, R, Z_mid + R @ block.W2.T + block.b2

    def loss(self, params: TransformerParams, Z: np.ndarray, y: np.ndarray) -> float:
        out, _ = self.forward(params, Z)
        preds = np.clip(out[:, -1, self.arch.d], -self.arch.M, self.arch.M)
        return float(np.mean((y - preds) ** 2))

    # Loss and gradient in to_vector order
    def loss_and_gradient(self, params: TransformerParams, Z: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        """
        Reverse-mode gradient of the batch mean of (y - clip(Z_L[n+1, d+1]))^2.

        Args:
            params (TransformerParams): Current parameters
            Z (np.ndarray): Embedded batch (b, n+1, d_e)
            y (np.ndarray): Held-out responses (b,)

        Returns:
            Tuple[float, np.ndarray]: Loss and the gradient vector
        """
        arch = self.arch
        out, inputs = self.forward(params, Z)
        raw = out[:, -1, arch.d]
        preds = np.clip(raw, -arch.M, arch.M)
        residual = y - preds
        loss = float(np.mean(residual ** 2))

        # Clamp subgradient: 1 inside and on the boundary, 0 strictly outside
        inside = (np.abs(raw) <= arch.M).astype(np.float64)
        dZ = np.zeros_like(out)
        dZ[:, -1, arch.d] = -2.0 * residual * inside / y.size

        grads: List[List[np.ndarray]] = []
        for block, Z_in in zip(reversed(params.blocks), reversed(inputs)):
            A, Bk, Cv, S, Z_mid, H, R, _ = self._block(Z_in, block)
            dR = dZ @ block.W2
            dH = dR * (H > 0)
            dW2 = np.einsum("bid,bim->dm", dZ, R)
            db2 = dZ.sum(axis=(0, 1))
            dW1 = np.einsum("bim,bid->md", dH, Z_mid)
            db1 = dH.sum(axis=(0, 1))
            dU = dZ + dH @ block.W1

            dA = dU @ np.swapaxes(S, -1, -2)
            dS = np.swapaxes(A, -1, -2) @ dU
            dBk = Cv @ np.swapaxes(dS, -1, -2)
            dCv = Bk @ dS
            dQ = np.einsum("bie,bif->ef", Z_in, dA)
            dK = np.einsum("bie,bif->ef", Z_in, dBk)
            dV = np.einsum("bie,bif->ef", Z_in, dCv)
            dZ = dU + dA @ block.Q.T + dBk @ block.K.T + dCv @ block.V.T
            grads.append([dQ, dK, dV, dW1, dW2, db1, db2])
        vector = np.concatenate([g.ravel() for block_grads in reversed(grads) for g in block_grads])
        return loss, vector

    # ReLU and clamp pattern, used to keep finite differences away from kinks
    def activation_signature(self, params: TransformerParams, Z: np.ndarray) -> np.ndarray:
        signs = []
        for block in params.blocks:
            parts = self._block(Z, block)
            signs.append((parts[5] > 0).ravel())
            Z = parts[-1]
        signs.append((np.abs(Z[:, -1, self.arch.d]) <= self.arch.M).ravel())
        return np.concatenate(signs)


## Risk estimation, ERM training and gradient verification
class RiskTrainer:
    """
    Evaluates predictors and trains transformers by projected first-order ERM.
    """

    # Mean squared error on the held-out queries of a pretraining set
    def empirical_risk(self, f: Predictor, pset: PretrainSet, sigma2: Optional[float] = None) -> RiskReport:
        """
        Compute (1/Γ) Σ (Y_{n+1} - f(D_n, X_{n+1}))^2.

        Args:
            f (Predictor): Predictor
            pset (PretrainSet): Sequences with held-out responses
            sigma2 (float): Optional noise variance for the excess column

        Returns:
            RiskReport: Exact mean with stderr 0
        """
        losses = (_responses(pset.prompts) - predict_all(f, pset.prompts)) ** 2
        value = float(np.mean(losses))
        return RiskReport(value=value, stderr=0.0, n_eval=pset.gamma,
                          excess_over_sigma2=value - sigma2 if sigma2 is not None else float("nan"))

    # Fresh-task Monte Carlo risk of several predictors on shared draws
    def population_risk_mc_shared(self,
                                  predictors: Dict[str, Predictor],
                                  specs: Specs,
                                  n: int,
                                  n_tasks: int,
                                  rng: np.random.Generator,
                                  family: str = "fourier",
                                  budget: int = 8,
                                  progress: bool = False) -> SharedRiskResult:
        """
        Estimate R(f) for every predictor on the same tasks and prompts.

        Args:
            predictors (Dict[str, Predictor]): Named predictors
            specs (Specs): (HolderSpec, CovariateSpec, NoiseSpec)
            n (int): Prompt length
            n_tasks (int): Number of fresh tasks, at least 2
            rng (np.random.Generator): Stream for tasks and prompts
            family (str): Task family
            budget (int): Fourier budget
            progress (bool): Show a progress bar

        Returns:
            SharedRiskResult: One report per predictor plus per-task losses
        """
        if n_tasks < 2:
            raise ValueError(f"Monte Carlo risk needs at least 2 tasks, got {n_tasks}")
        holder, cov, noise = specs
        generator = PromptGenerator(holder, cov, noise, family=family, budget=budget)
        prompts = [generator.prompt(n, rng) for _ in tqdm(range(n_tasks), desc="MC tasks", disable=not progress)]
        responses = _responses(prompts)
        losses = {name: (responses - predict_all(f, prompts)) ** 2 for name, f in predictors.items()}
        reports = {name: RiskReport(value=float(np.mean(values)),
                                    stderr=_jackknife_stderr(values),
                                    n_eval=n_tasks,
                                    excess_over_sigma2=float(np.mean(values)) - noise.sigma2)
                   for name, values in losses.items()}
        return SharedRiskResult(reports=reports, losses=pd.DataFrame(losses), sigma2=noise.sigma2)

    def population_risk_mc(self, f: Predictor, specs: Specs, n: int, n_tasks: int, rng: np.random.Generator,
                           family: str = "fourier", budget: int = 8, progress: bool = False) -> RiskReport:
        """Single-predictor Monte Carlo risk with jackknife stderr."""
        return self.population_risk_mc_shared({"f": f}, specs, n, n_tasks, rng, family, budget, progress).reports["f"]

    # Projected first-order ERM
    def train_erm(self,
                  arch: ArchSpec,
                  pset: PretrainSet,
                  cfg: TrainConfig,
                  init: Optional[TransformerParams] = None) -> TrainResult:
        """
        Minimize the empirical risk over T(d_e, d_ffn, L, B) with projection onto [-B, B].

        Args:
            arch (ArchSpec): Architecture; its M must match the data's M
            pset (PretrainSet): Training sequences
            cfg (TrainConfig): Optimizer settings
            init (TransformerParams): Warm start; zeros or uniform(init_scale) otherwise

        Returns:
            TrainResult: Best-so-far parameters and the per-epoch loss curve

        Raises:
            TrainingDivergenceError: If the loss stays above 10x the initial loss for 3 epochs
        """
        if cfg.batch_size > pset.gamma:
            raise ValueError(f"Batch size {cfg.batch_size} exceeds Γ={pset.gamma}")
        task = pset.prompts[0].task
        if task is not None and not math.isclose(task.spec.M, arch.M):
            raise ValueError(f"Architecture clamp M={arch.M} does not match the data's M={task.spec.M}")
        if cfg.B is not None:
            arch = arch.with_bound(cfg.B)
        rng = np.random.default_rng(cfg.seed)
        if init is not None:
            params = TransformerParams.from_vector(arch, init.to_vector())
        elif cfg.init_scale > 0:
            params = TransformerParams.random(arch, rng, cfg.init_scale)
        else:
            params = TransformerParams.zeros(arch)

        engine = TransformerGradient(arch)
        Z_all, y_all = engine.batch(pset.prompts)
        theta = params.to_vector()
        initial = self._full_loss(engine, arch, theta, Z_all, y_all)
        best_theta, best_loss, best_epoch = theta.copy(), initial, 0
        history, best_history = [initial], [initial]
        first_moment, second_moment = np.zeros_like(theta), np.zeros_like(theta)
        updates, above, stale, stopped_early = 0, 0, 0, False
        logger.info(f"🚀 ERM on Γ={pset.gamma}, L={arch.L}, n_params={theta.size}, initial risk {initial:.6f}")

        for epoch in tqdm(range(1, cfg.epochs + 1), desc="ERM epochs", disable=not cfg.progress):
            order = rng.permutation(pset.gamma)
            for start in range(0, pset.gamma, cfg.batch_size):
                index = order[start:start + cfg.batch_size]
                _, grad = engine.loss_and_gradient(TransformerParams.from_vector(arch, theta), Z_all[index], y_all[index])
                step = cfg.step_at(updates)
                updates += 1
                if cfg.optimizer == "adam":
                    first_moment = cfg.beta1 * first_moment + (1 - cfg.beta1) * grad
                    second_moment = cfg.beta2 * second_moment + (1 - cfg.beta2) * grad ** 2
                    m_hat = first_moment / (1 - cfg.beta1 ** updates)
                    v_hat = second_moment / (1 - cfg.beta2 ** updates)
                    theta = theta - step * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
                else:
                    theta = theta - step * grad
                theta = np.clip(theta, -arch.B, arch.B)

            loss = self._full_loss(engine, arch, theta, Z_all, y_all)
            history.append(loss)
            if loss < best_loss - cfg.early_stop_tol:
                best_theta, best_loss, best_epoch, stale = theta.copy(), loss, epoch, 0
            else:
                stale += 1
                if loss < best_loss:
                    best_theta, best_loss, best_epoch = theta.copy(), loss, epoch
            best_history.append(best_loss)

            above = above + 1 if loss > DIVERGENCE_FACTOR * initial else 0
            if above >= DIVERGENCE_EPOCHS or not math.isfinite(loss):
                logger.error(f"❌ ERM diverged at epoch {epoch}: risk {loss:.4g} vs initial {initial:.4g}")
                raise TrainingDivergenceError(f"Empirical risk exceeded {DIVERGENCE_FACTOR:g}x the initial value "
                                              f"for {DIVERGENCE_EPOCHS} epochs", history)
            if cfg.early_stop_tol > 0 and stale >= cfg.patience:
                stopped_early = True
                logger.info(f"📊 Early stop at epoch {epoch}: no improvement above {cfg.early_stop_tol:g}")
                break

        logger.info(f"✅ ERM finished: best risk {best_loss:.6f} at epoch {best_epoch}")
        return TrainResult(params=TransformerParams.from_vector(arch, best_theta), loss_history=history,
                           best_history=best_history, best_epoch=best_epoch, stopped_early=stopped_early)

    def _full_loss(self, engine: TransformerGradient, arch: ArchSpec, theta: np.ndarray,
                   Z: np.ndarray, y: np.ndarray, chunk: int = 256) -> float:
        params = TransformerParams.from_vector(arch, theta)
        total = 0.0
        for start in range(0, y.size, chunk):
            total += engine.loss(params, Z[start:start + chunk], y[start:start + chunk]) * y[start:start + chunk].size
        return total / y.size

    # Central finite differences against the reverse-mode gradient
    def gradient_check(self,
                       params: TransformerParams,
                       pset: PretrainSet,
                       n_coords: int = 10,
                       step: float = 1e-5,
                       rng: Optional[np.random.Generator] = None,
                       max_resamples: int = 200) -> GradientCheckReport:
        """
        Compare analytic and finite-difference partial derivatives of the empirical risk.

        Coordinates whose perturbation flips a ReLU or the readout clamp are resampled.

        Args:
            params (TransformerParams): Point of evaluation
            pset (PretrainSet): Sequences defining the loss
            n_coords (int): Number of checked coordinates
            step (float): Finite-difference step
            rng (np.random.Generator): Coordinate sampler
            max_resamples (int): Cap on rejected coordinates

        Returns:
            GradientCheckReport: Per-coordinate values and relative errors
        """
        rng = rng or np.random.default_rng(0)
        arch = params.arch.with_bound(max(params.arch.B, params.max_abs_param() + 2 * step))
        engine = TransformerGradient(arch)
        Z, y = engine.batch(pset.prompts)
        theta = params.to_vector()
        _, analytic_all = engine.loss_and_gradient(TransformerParams.from_vector(arch, theta), Z, y)
        base = engine.activation_signature(TransformerParams.from_vector(arch, theta), Z)

        coords, analytic, numeric, resampled = [], [], [], 0
        while len(coords) < n_coords:
            i = int(rng.integers(theta.size))
            plus, minus = theta.copy(), theta.copy()
            plus[i] += step
            minus[i] -= step
            p_plus, p_minus = TransformerParams.from_vector(arch, plus), TransformerParams.from_vector(arch, minus)
            if not (np.array_equal(base, engine.activation_signature(p_plus, Z))
                    and np.array_equal(base, engine.activation_signature(p_minus, Z))):
                resampled += 1
                if resampled > max_resamples:
                    raise ValueError(f"Could not find {n_coords} kink-free coordinates in {max_resamples} draws")
                continue
            coords.append(i)
            analytic.append(analytic_all[i])
            numeric.append((engine.loss(p_plus, Z, y) - engine.loss(p_minus, Z, y)) / (2 * step))
        analytic_arr, numeric_arr = np.array(analytic), np.array(numeric)
        relative = np.abs(analytic_arr - numeric_arr) / np.maximum(np.abs(analytic_arr) + np.abs(numeric_arr), 1e-4)
        return GradientCheckReport(coordinates=np.array(coords), analytic=analytic_arr, numeric=numeric_arr,
                                   relative_errors=relative, resampled=resampled)

    # Risk gaps of the ERM / construction / estimator chain on shared draws
    def risk_decomposition_report(self,
                                  f_hat: Predictor,
                                  f_TF: Predictor,
                                  f_LocPol: Predictor,
                                  specs: Specs,
                                  n: int,
                                  n_tasks: int,
                                  rng: np.random.Generator,
                                  arch: Optional[ArchSpec] = None,
                                  gamma: Optional[int] = None,
                                  family: str = "fourier") -> pd.DataFrame:
        """
        Tabulate R(f_hat), R(f_TF), R(f_LocPol), sigma^2 and the telescoping gaps.

        Args:
            f_hat (Predictor): Trained transformer
            f_TF (Predictor): Constructed transformer
            f_LocPol (Predictor): Local polynomial estimator
            specs (Specs): (HolderSpec, CovariateSpec, NoiseSpec)
            n (int): Prompt length
            n_tasks (int): Monte Carlo tasks
            rng (np.random.Generator): Stream for shared draws
            arch (ArchSpec): Trained class, enables the statistical tail row
            gamma (int): Pretraining size for the tail row
            family (str): Task family

        Returns:
            pd.DataFrame: Rows (quantity, value, stderr)
        """
        shared = self.population_risk_mc_shared({"hat": f_hat, "tf": f_TF, "locpol": f_LocPol},
                                                specs, n, n_tasks, rng, family=family)
        losses, sigma2 = shared.losses, shared.sigma2

        def row(name: str, values: np.ndarray) -> Dict[str, Any]:
            return {"quantity": name, "value": float(np.mean(values)), "stderr": _jackknife_stderr(np.asarray(values))}

        rows = [row("risk_hat", losses["hat"]), row("risk_tf", losses["tf"]), row("risk_locpol", losses["locpol"]),
                {"quantity": "sigma2", "value": sigma2, "stderr": 0.0},
                row("excess_hat", losses["hat"] - sigma2),
                row("gap_hat_tf", losses["hat"] - losses["tf"]),
                row("gap_tf_locpol", losses["tf"] - losses["locpol"]),
                row("gap_locpol_sigma2", losses["locpol"] - sigma2)]
        if arch is not None and gamma is not None:
            tail = bound_calculator.expectation_tail(ClassDims(arch.d_e, arch.d_ffn, arch.L, arch.B), arch.M, n, gamma)
            rows.append({"quantity": "expectation_tail", "value": tail, "stderr": 0.0})
        return pd.DataFrame(rows, columns=RISK_COLUMNS)


# Global instance for easy access
risk_trainer = RiskTrainer()


def empirical_risk(f: Predictor, pset: PretrainSet, sigma2: Optional[float] = None) -> RiskReport:
    """Backward compatibility function."""
    return risk_trainer.empirical_risk(f, pset, sigma2)


def population_risk_mc(f: Predictor, specs: Specs, n: int, n_tasks: int, rng: np.random.Generator,
                       family: str = "fourier", budget: int = 8) -> RiskReport:
    """Backward compatibility function."""
    return risk_trainer.population_risk_mc(f, specs, n, n_tasks, rng, family, budget)


def population_risk_mc_shared(predictors: Dict[str, Predictor], specs: Specs, n: int, n_tasks: int,
                              rng: np.random.Generator, family: str = "fourier") -> SharedRiskResult:
    """Backward compatibility function."""
    return risk_trainer.population_risk_mc_shared(predictors, specs, n, n_tasks, rng, family)


def train_erm(arch: ArchSpec, pset: PretrainSet, cfg: TrainConfig,
              init: Optional[TransformerParams] = None) -> TrainResult:
    """Backward compatibility function."""
    return risk_trainer.train_erm(arch, pset, cfg, init)


def gradient_check(params: TransformerParams, pset: PretrainSet, n_coords: int = 10, step: float = 1e-5,
                   rng: Optional[np.random.Generator] = None) -> GradientCheckReport:
    """Backward compatibility function."""
    return risk_trainer.gradient_check(params, pset, n_coords, step, rng)


def risk_decomposition_report(f_hat: Predictor, f_TF: Predictor, f_LocPol: Predictor, specs: Specs, n: int,
                              n_tasks: int, rng: np.random.Generator, arch: Optional[ArchSpec] = None,
                              gamma: Optional[int] = None) -> pd.DataFrame:
    """Backward compatibility function."""
    return risk_trainer.risk_decomposition_report(f_hat, f_TF, f_LocPol, specs, n, n_tasks, rng, arch, gamma)
