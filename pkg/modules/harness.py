"""
harness.py

Provides experiment orchestration for rate curves, construction-versus-estimator
comparisons, Gram event frequencies and covering-bound tables using a class-based approach.
"""
from typing import List, Dict, Optional, Any, Tuple
from dataclasses import dataclass
from multiprocessing import Pool
import hashlib
import json
import logging
import math
import os

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import comb
from sklearn.linear_model import LinearRegression
from tqdm import tqdm

from app_config import ExperimentConfig
from modules.construction import BuildReport, ConstructionConfig, locpol_transformer_builder, make_construction_config
from modules.datagen import CovariateSpec, HolderSpec, NoiseSpec, PromptGenerator
from modules.locpol import BasisSpec, KernelSpec, LocPolPredictor, build_weighted_system, default_degree, spectral_bounds
from modules.persistence import ArtifactStore, PartialRows
from modules.transformer import ClassDims, TransformerParams, TransformerPredictor, bound_calculator

logger = logging.getLogger(__name__)

RATE_COLUMNS = ["n", "tasks", "h", "p", "risk", "excess_risk", "risk_minus_sigma2", "stderr", "gram_event_freq",
                "degenerate_count", "tf_excess_risk", "seed", "config_hash"]
FINGERPRINT_EXCLUDED = ("overwrite", "workers", "out_dir", "output_format")
STREAM_NAMESPACE = 2 ** 31
COMPARISON_COLUMNS = ["prompt", "lambda_min", "locpol", "tf", "abs_gap", "degenerate", "truth", "response"]
COVERING_COLUMNS = ["n", "gamma", "L", "B", "d_e", "d_ffn", "delta", "log_covering", "expectation_tail",
                    "log_shape"]
SLOPE_TOLERANCE = 0.15
CONSTANT_FAMILY_MAX_SLOPE = -0.5
MEDIAN_GAP_TOLERANCE = 1e-3
Q95_GAP_TOLERANCE = 1e-2


def experiment_specs(cfg: ExperimentConfig) -> Tuple[HolderSpec, CovariateSpec, NoiseSpec]:
    holder = HolderSpec(d=cfg.d, alpha=cfg.alpha, M=cfg.M)
    if cfg.density_kind == "tilted":
        cov = CovariateSpec.tilted(cfg.d)
    elif cfg.density_kind == "uniform":
        cov = CovariateSpec.uniform(cfg.d)
    else:
        raise ValueError(f"Unsupported density kind: {cfg.density_kind}")
    return holder, cov, NoiseSpec(half_width=cfg.noise_half_width)


def experiment_generator(cfg: ExperimentConfig) -> PromptGenerator:
    holder, cov, noise = experiment_specs(cfg)
    return PromptGenerator(holder, cov, noise, family=cfg.task_family, budget=cfg.fourier_budget)


# Stream keyed by (seed, purpose, index) under a namespace disjoint from SeedSequence(seed).spawn children
def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    """
    Keys always start with STREAM_NAMESPACE, so they never equal the one-element
    spawn keys that pretraining sets draw their sequences from.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAM_NAMESPACE, *key)))


# Hash of every config field that changes the numbers of a rate row
def rate_fingerprint(cfg: ExperimentConfig, include_tf: bool = False) -> str:
    payload = {k: v for k, v in cfg.to_dict().items() if k not in FINGERPRINT_EXCLUDED}
    payload["include_tf"] = include_tf
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()
    return f"cfg-{digest[:16]}"


def _jackknife(values: np.ndarray) -> float:
    count = values.size
    loo = (values.sum() - values) / (count - 1)
    return float(math.sqrt((count - 1) / count * np.sum((loo - loo.mean()) ** 2)))


# OLS slope of log excess on log n with a t-based half width
def fit_loglog_slope(ns: np.ndarray, excess: np.ndarray, level: float = 0.95) -> Tuple[float, float, float]:
    """
    Fit log(excess) = a + slope log(n) by ordinary least squares.

    Args:
        ns (np.ndarray): Grid sizes
        excess (np.ndarray): Positive excess risks
        level (float): Confidence level of the half width

    Returns:
        Tuple[float, float, float]: (slope, intercept, half width); half width is nan below 3 points
    """
    ns, excess = np.asarray(ns, dtype=np.float64), np.asarray(excess, dtype=np.float64)
    keep = excess > 0
    if keep.sum() < 2:
        raise ValueError(f"Slope fit needs at least 2 positive excess risks, got {int(keep.sum())}")
    x, y = np.log(ns[keep]).reshape(-1, 1), np.log(excess[keep])
    model = LinearRegression().fit(x, y)
    slope, intercept = float(model.coef_[0]), float(model.intercept_)
    dof = y.size - 2
    if dof < 1:
        return slope, intercept, float("nan")
    residual = y - model.predict(x)
    se = math.sqrt(float(residual @ residual) / dof / float(np.sum((x[:, 0] - x[:, 0].mean()) ** 2)))
    return slope, intercept, float(stats.t.ppf(0.5 + level / 2.0, dof) * se)


@dataclass
class RateResult:
    rows: pd.DataFrame
    slope: float
    intercept: float
    half_width: float
    expected_slope: float
    config: Dict[str, Any]
    tf_slope: Optional[float] = None
    status: str = "complete"

    def summary(self) -> Dict[str, Any]:
        return {"slope": self.slope, "intercept": self.intercept, "half_width": self.half_width,
                "expected_slope": self.expected_slope, "tf_slope": self.tf_slope, "status": self.status,
                "config": self.config}


@dataclass
class ComparisonResult:
    rows: pd.DataFrame
    summary: Dict[str, Any]
    report: BuildReport
    construction: ConstructionConfig
    params: Optional[TransformerParams] = None


def _rate_point(job: Tuple[int, int, Dict[str, Any], bool]) -> Dict[str, Any]:
    # One grid point; module-level so worker processes can unpickle it
    index, n, cfg_dict, include_tf = job
    cfg = ExperimentConfig(**cfg_dict)
    generator = experiment_generator(cfg)
    predictor = LocPolPredictor(alpha=cfg.alpha, M=cfg.M, d=cfg.d)
    kernel = predictor.kernel_for(n)
    rng = keyed_rng(cfg.seed, 0, index)
    prompts = [generator.prompt(n, rng) for _ in range(cfg.tasks)]

    fits = [predictor.estimator.fit(p, kernel, predictor.basis, cfg.M) for p in prompts]
    estimates = np.array([fit.estimate for fit in fits])
    truths = np.array([p.truth_at_query for p in prompts])
    responses = np.array([p.query_response for p in prompts])
    squared_bias = (estimates - truths) ** 2
    risk = float(np.mean((responses - estimates) ** 2))
    row = {
        "n": n,
        "tasks": cfg.tasks,
        "h": kernel.h,
        "p": predictor.basis.p,
        "risk": risk,
        "excess_risk": float(np.mean(squared_bias)),
        "risk_minus_sigma2": risk - NoiseSpec(cfg.noise_half_width).sigma2,
        "stderr": _jackknife(squared_bias),
        "gram_event_freq": float(np.mean([fit.lambda_min >= cfg.gram_threshold for fit in fits])),
        "degenerate_count": int(sum(fit.solved_by != "normal_equations" for fit in fits)),
        "tf_excess_risk": float("nan"),
        "seed": cfg.seed,
        "config_hash": rate_fingerprint(cfg, include_tf),
    }
    if include_tf:
        calibration = [generator.prompt(n, keyed_rng(cfg.seed, 1, index, i)) for i in range(cfg.calibration_prompts)]
        construction = make_construction_config(n, cfg.d, cfg.alpha, cfg.M, calibration_prompts=calibration,
                                                T=cfg.T, L0=cfg.L0, eta=cfg.eta, T_cap=cfg.T_cap)
        params, _ = locpol_transformer_builder.build(construction)
        tf = TransformerPredictor(params).predict_batch(prompts)
        row["tf_excess_risk"] = float(np.mean((tf - truths) ** 2))
    return row


## Orchestrates every experiment and writes its artifacts
class ExperimentHarness:
    """
    Runs grid experiments with seeded streams, partial checkpoints and acceptance checks.
    """

    def __init__(self, store: Optional[ArtifactStore] = None):
        self.store = store or ArtifactStore()

    def _path(self, cfg: ExperimentConfig, name: str, ext: Optional[str] = None) -> str:
        return os.path.join(cfg.out_dir, f"{name}.{ext or cfg.output_format}")

    # Excess risk of the local polynomial estimator across the n grid
    def run_rate_experiment(self, cfg: ExperimentConfig, include_tf: bool = False, write: bool = True,
                            progress: bool = True) -> RateResult:
        """
        Estimate per-n excess risk and fit the log-log slope.

        Args:
            cfg (ExperimentConfig): Grid, class and MC sizes
            include_tf (bool): Also evaluate the constructed transformer at each n
            write (bool): Emit result files and the partial checkpoint
            progress (bool): Show a progress bar

        Returns:
            RateResult: Rows aligned with the n grid and the fitted slope
        """
        if len(cfg.n_grid) < 4 or cfg.tasks < 100:
            logger.warning(f"⚠️ Rate fit below the recommended budget: {len(cfg.n_grid)} grid points, {cfg.tasks} tasks")
        partial = PartialRows(self._path(cfg, "rates", "partial.csv"), RATE_COLUMNS) if write else None
        if write:
            for ext in (cfg.output_format, "summary.json"):
                self.store.ensure_writable(self._path(cfg, "rates", ext), cfg.overwrite)
        done = partial.load() if partial else pd.DataFrame(columns=RATE_COLUMNS)
        if len(done):
            fingerprint = rate_fingerprint(cfg, include_tf)
            matching = (done["seed"] == cfg.seed) & (done["config_hash"].astype(str) == fingerprint)
            if not matching.all():
                logger.warning(f"⚠️ Ignoring {int((~matching).sum())} partial rows written under a different "
                               f"seed or configuration")
            done = done[matching]
        finished = set(int(n) for n in done["n"]) if len(done) else set()
        jobs = [(i, n, cfg.to_dict(), include_tf) for i, n in enumerate(cfg.n_grid) if n not in finished]

        logger.info(f"🚀 Rate experiment: {len(jobs)} grid points left, {cfg.tasks} tasks each, {cfg.workers} workers")
        rows = [r for r in done.to_dict(orient="records")] if len(done) else []
        if cfg.workers > 1 and len(jobs) > 1:
            with Pool(processes=cfg.workers) as pool:
                results = pool.imap(_rate_point, jobs)
                for row in tqdm(results, total=len(jobs), desc="n grid", disable=not progress):
                    rows.append(row)
                    if partial:
                        partial.append(row)
        else:
            for job in tqdm(jobs, desc="n grid", disable=not progress):
                row = _rate_point(job)
                rows.append(row)
                if partial:
                    partial.append(row)

        frame = pd.DataFrame(rows, columns=RATE_COLUMNS).sort_values("n").reset_index(drop=True)
        frame = frame[frame["n"].isin(cfg.n_grid)].reset_index(drop=True)
        expected = -2.0 * cfg.alpha / (2.0 * cfg.alpha + cfg.d)
        status = "complete"
        try:
            slope, intercept, half_width = fit_loglog_slope(frame["n"].to_numpy(), frame["excess_risk"].to_numpy())
        except ValueError as e:
            logger.warning(f"⚠️ {e}")
            slope, intercept, half_width, status = float("nan"), float("nan"), float("nan"), "partial"
        tf_slope = None
        if include_tf and frame["tf_excess_risk"].notna().all():
            tf_slope = fit_loglog_slope(frame["n"].to_numpy(), frame["tf_excess_risk"].to_numpy())[0]
        result = RateResult(rows=frame, slope=slope, intercept=intercept, half_width=half_width,
                            expected_slope=expected, config=cfg.to_dict(), tf_slope=tf_slope, status=status)
        logger.info(f"📊 Fitted slope {slope:.3f} ± {half_width:.3f} (exponent -2α/(2α+d) = {expected:.3f})")
        if write:
            self.store.write_frame(frame, self._path(cfg, "rates"), cfg.output_format,
                                   metadata=result.summary(), overwrite=cfg.overwrite)
            self.store.write_json(result.summary(), self._path(cfg, "rates", "summary.json"), overwrite=cfg.overwrite)
            partial.discard()
        return result

    # Constructed transformer against the estimator it emulates
    def run_construction_comparison(self, cfg: ExperimentConfig, write: bool = True,
                                    keep_params: bool = False) -> ComparisonResult:
        """
        Compare f_TF and f_LocPol prompt by prompt at n = n_grid[0].

        Args:
            cfg (ExperimentConfig): Class, construction overrides and prompt count
            write (bool): Emit the per-prompt table and summary
            keep_params (bool): Return the built parameters

        Returns:
            ComparisonResult: Per-prompt rows, gap quantiles, degenerate count and risk gap

        Raises:
            InfeasibleConstructionError: If xi > 1 at the configured L0
            OverwriteRefusedError: If an output exists and overwrite is off, before any construction work
        """
        n = cfg.n_grid[0]
        if write:
            for ext in (cfg.output_format, "summary.json"):
                self.store.ensure_writable(self._path(cfg, "compare", ext), cfg.overwrite)
        generator = experiment_generator(cfg)
        calibration = [generator.prompt(n, keyed_rng(cfg.seed, 1, 0, i)) for i in range(cfg.calibration_prompts)]
        construction = make_construction_config(n, cfg.d, cfg.alpha, cfg.M, calibration_prompts=calibration,
                                                T=cfg.T, L0=cfg.L0, eta=cfg.eta, T_cap=cfg.T_cap)
        params, report = locpol_transformer_builder.build(construction)

        rng = keyed_rng(cfg.seed, 2)
        prompts = [generator.prompt(n, rng) for _ in range(cfg.n_prompts)]
        kernel, basis = construction.kernel, construction.basis
        predictor = LocPolPredictor(alpha=cfg.alpha, M=cfg.M, d=cfg.d, h=construction.h, p=construction.p)
        fits = [predictor.estimator.fit(p, kernel, basis, cfg.M) for p in prompts]
        tf = TransformerPredictor(params).predict_batch(prompts)
        locpol = np.array([fit.estimate for fit in fits])
        lambdas = np.array([fit.lambda_min for fit in fits])
        degenerate = lambdas < cfg.nondegenerate_lambda
        frame = pd.DataFrame({"prompt": np.arange(len(prompts)), "lambda_min": lambdas, "locpol": locpol, "tf": tf,
                              "abs_gap": np.abs(tf - locpol), "degenerate": degenerate,
                              "truth": [p.truth_at_query for p in prompts],
                              "response": [p.query_response for p in prompts]}, columns=COMPARISON_COLUMNS)

        gaps = frame.loc[~degenerate, "abs_gap"].to_numpy()
        responses = frame["response"].to_numpy()
        loss_gap = (responses - tf) ** 2 - (responses - locpol) ** 2
        summary = {
            "n": n,
            "prompts": len(prompts),
            "nondegenerate_lambda": cfg.nondegenerate_lambda,
            "degenerate_count": int(degenerate.sum()),
            "degenerate_fraction": float(degenerate.mean()),
            "median_gap": float(np.median(gaps)) if gaps.size else float("nan"),
            "q95_gap": float(np.quantile(gaps, 0.95)) if gaps.size else float("nan"),
            "max_gap": float(np.max(gaps)) if gaps.size else float("nan"),
            "risk_gap": float(np.mean(loss_gap)),
            "risk_gap_stderr": _jackknife(loss_gap) if loss_gap.size > 1 else float("nan"),
            "seed": cfg.seed,
            "construction": construction.to_dict(),
        }
        logger.info(f"📊 Median |f_TF - f_LocPol| = {summary['median_gap']:.3e}, "
                    f"q95 = {summary['q95_gap']:.3e}, degenerate {summary['degenerate_count']}/{len(prompts)}")
        if write:
            self.store.write_frame(frame, self._path(cfg, "compare"), cfg.output_format,
                                   metadata=summary, overwrite=cfg.overwrite)
            self.store.write_json({**summary, "build_report": report.to_dict()},
                                  self._path(cfg, "compare", "summary.json"), overwrite=cfg.overwrite)
        return ComparisonResult(rows=frame, summary=summary, report=report, construction=construction,
                                params=params if keep_params else None)

    # Covering and expectation-bound terms over (n, Γ)
    def run_covering_table(self, cfg: ExperimentConfig, write: bool = True) -> pd.DataFrame:
        """
        Tabulate the covering bound and the ERM tail term for the architecture sized by n.

        L = ceil(C log(e n)), B = C n^2, d_e = 2d + 2D + 5, d_ffn = 6(D+1)(14+p), delta = 1/Γ.

        Args:
            cfg (ExperimentConfig): n grid, Γ grid, class and block constant C
            write (bool): Emit the table

        Returns:
            pd.DataFrame: One row per (n, Γ)
        """
        p = default_degree(cfg.alpha)
        D = int(comb(cfg.d + p, p, exact=True))
        d_e, d_ffn = 2 * cfg.d + 2 * D + 5, 6 * (D + 1) * (14 + p)
        rows = []
        for n in cfg.n_grid:
            dims = ClassDims(d_e=d_e, d_ffn=d_ffn, L=int(math.ceil(cfg.block_constant * math.log(math.e * n))),
                             B=cfg.block_constant * n ** 2)
            for gamma in cfg.gamma_grid:
                delta = min(1.0 / gamma, cfg.M)
                rows.append({"n": n, "gamma": gamma, "L": dims.L, "B": dims.B, "d_e": d_e, "d_ffn": d_ffn,
                             "delta": delta,
                             "log_covering": bound_calculator.covering_log_bound(dims, cfg.M, n, delta),
                             "expectation_tail": bound_calculator.expectation_tail(dims, cfg.M, n, gamma),
                             "log_shape": math.log(n) ** 3 + math.log(n) * math.log(gamma)})
        frame = pd.DataFrame(rows, columns=COVERING_COLUMNS)
        if write:
            self.store.write_frame(frame, self._path(cfg, "covering"), cfg.output_format,
                                   metadata={"config": cfg.to_dict()}, overwrite=cfg.overwrite)
        return frame

    # Frequency of lambda_min(X^T X) >= threshold across the n grid
    def gram_event_frequencies(self, cfg: ExperimentConfig, progress: bool = False) -> pd.DataFrame:
        generator = experiment_generator(cfg)
        p = default_degree(cfg.alpha)
        rows = []
        for index, n in enumerate(tqdm(cfg.n_grid, desc="Gram event", disable=not progress)):
            rng = keyed_rng(cfg.seed, 3, index)
            kernel, basis = KernelSpec(h=n ** (-1.0 / (2.0 * cfg.alpha + cfg.d)), d=cfg.d), BasisSpec(d=cfg.d, p=p)
            lambdas = np.array([spectral_bounds(build_weighted_system(generator.prompt(n, rng), kernel, basis)[0])[0]
                                for _ in range(cfg.n_prompts)])
            rows.append({"n": n, "prompts": cfg.n_prompts, "threshold": cfg.gram_threshold,
                         "frequency": float(np.mean(lambdas >= cfg.gram_threshold)),
                         "median_lambda_min": float(np.median(lambdas))})
        return pd.DataFrame(rows)

    # Acceptance thresholds of a rate run
    def check_rates(self, result: RateResult, cfg: ExperimentConfig) -> List[str]:
        failures = []
        if not math.isfinite(result.slope):
            return ["slope could not be fitted"]
        if cfg.task_family == "constant":
            if result.slope > CONSTANT_FAMILY_MAX_SLOPE:
                failures.append(f"constant-family slope {result.slope:.3f} > {CONSTANT_FAMILY_MAX_SLOPE}")
        elif abs(result.slope - result.expected_slope) > SLOPE_TOLERANCE:
            failures.append(f"slope {result.slope:.3f} outside {result.expected_slope:.3f} ± {SLOPE_TOLERANCE}")
        return failures

    def check_comparison(self, result: ComparisonResult) -> List[str]:
        failures = []
        summary = result.summary
        if not summary["median_gap"] <= MEDIAN_GAP_TOLERANCE:
            failures.append(f"median gap {summary['median_gap']:.3e} > {MEDIAN_GAP_TOLERANCE}")
        if not summary["q95_gap"] <= Q95_GAP_TOLERANCE:
            failures.append(f"95th percentile gap {summary['q95_gap']:.3e} > {Q95_GAP_TOLERANCE}")
        return failures


# Global instance for easy access
experiment_harness = ExperimentHarness()


def run_rate_experiment(cfg: ExperimentConfig, include_tf: bool = False) -> RateResult:
    """Backward compatibility function."""
    return experiment_harness.run_rate_experiment(cfg, include_tf)


def run_construction_comparison(cfg: ExperimentConfig) -> ComparisonResult:
    """Backward compatibility function."""
    return experiment_harness.run_construction_comparison(cfg)


def run_covering_table(cfg: ExperimentConfig) -> pd.DataFrame:
    """Backward compatibility function."""
    return experiment_harness.run_covering_table(cfg)
