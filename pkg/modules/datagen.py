"""
datagen.py

Provides Hölder-ball task sampling and in-context prompt generation using a class-based approach.
"""
from typing import List, Dict, Optional, Any, Tuple
from dataclasses import dataclass, field
from itertools import product
import logging
import math

import numpy as np

from modules.errors import UnsatisfiableSpecError

logger = logging.getLogger(__name__)

MAX_FREQUENCY = 5
HOLDER_RADIUS = 0.1
DEFAULT_GRID_RESOLUTION = 512
MAX_GRID_POINTS = 10 ** 6
MAX_FULL_SEPARATIONS = 64
TASK_FAMILIES = ("fourier", "constant", "polynomial")


## Smoothness class H(d, alpha, M)
@dataclass(frozen=True)
class HolderSpec:
    """
    Hölder ball parameters: covariate dimension, smoothness and amplitude bound.
    """
    d: int
    alpha: float
    M: float

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"Covariate dimension must be a positive integer, got {self.d}")
        if not self.alpha > 0:
            raise ValueError(f"Smoothness alpha must be positive, got {self.alpha}")
        if not self.M > 0:
            raise ValueError(f"Amplitude bound M must be positive, got {self.M}")

    @property
    def underline_alpha(self) -> int:
        """Largest integer strictly less than alpha."""
        return int(math.ceil(self.alpha)) - 1

    @property
    def holder_exponent(self) -> float:
        """Exponent applied to the distance in the Hölder quotient, in (0, 1]."""
        return self.alpha - self.underline_alpha

    def to_dict(self) -> Dict[str, Any]:
        return {"d": int(self.d), "alpha": float(self.alpha), "M": float(self.M)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HolderSpec":
        return cls(d=int(data["d"]), alpha=float(data["alpha"]), M=float(data["M"]))


## Covariate law on [0,1]^d with known density bounds
@dataclass(frozen=True)
class CovariateSpec:
    """
    Covariate distribution: uniform, or tilted with density (1 + 0.5 x_1) / 1.25.
    """
    d: int
    density_kind: str = "uniform"
    c_X: float = 1.0
    C_X: float = 1.0

    def __post_init__(self):
        if self.density_kind not in ("uniform", "tilted"):
            raise ValueError(f"Unsupported density kind: {self.density_kind}")
        if not 0 < self.c_X <= self.C_X < np.inf:
            raise ValueError(f"Density bounds must satisfy 0 < c_X <= C_X, got {self.c_X}, {self.C_X}")
        if self.density_kind == "uniform" and (self.c_X != 1.0 or self.C_X != 1.0):
            raise ValueError("Uniform covariates require c_X = C_X = 1")

    @classmethod
    def uniform(cls, d: int) -> "CovariateSpec":
        return cls(d=d, density_kind="uniform", c_X=1.0, C_X=1.0)

    @classmethod
    def tilted(cls, d: int) -> "CovariateSpec":
        return cls(d=d, density_kind="tilted", c_X=1.0 / 1.25, C_X=1.5 / 1.25)

    # Evaluate the covariate density
    def density(self, x: np.ndarray) -> np.ndarray:
        """
        Evaluate f_X at one or more points.

        Args:
            x (np.ndarray): Points of shape (..., d)

        Returns:
            np.ndarray: Density values of shape (...)
        """
        x = np.asarray(x, dtype=np.float64)
        if self.density_kind == "uniform":
            return np.ones(x.shape[:-1])
        return (1.0 + 0.5 * x[..., 0]) / 1.25

    # Draw covariates, by rejection for the tilted law
    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """
        Draw covariates.

        Args:
            size (int): Number of points
            rng (np.random.Generator): Seeded stream

        Returns:
            np.ndarray: Array of shape (size, d)
        """
        if self.density_kind == "uniform":
            return rng.random((size, self.d))
        accepted: List[np.ndarray] = []
        remaining = size
        while remaining > 0:
            proposal = rng.random((2 * remaining + 8, self.d))
            keep = rng.random(proposal.shape[0]) * self.C_X <= self.density(proposal)
            accepted.append(proposal[keep][:remaining])
            remaining -= accepted[-1].shape[0]
        return np.concatenate(accepted, axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {"d": self.d, "density_kind": self.density_kind, "c_X": self.c_X, "C_X": self.C_X}


## Bounded, centred noise
@dataclass(frozen=True)
class NoiseSpec:
    """
    Uniform noise on [-b, b].
    """
    half_width: float = 0.5

    def __post_init__(self):
        if not 0 < self.half_width <= 1:
            raise ValueError(f"Noise half width must lie in (0, 1], got {self.half_width}")

    @property
    def sigma2(self) -> float:
        return self.half_width ** 2 / 3.0

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.half_width, self.half_width, size)


@dataclass(frozen=True)
class HolderReport:
    max_abs_value: float
    max_holder_quotient: float

    def as_dict(self) -> Dict[str, float]:
        return {"max_abs_value": self.max_abs_value, "max_holder_quotient": self.max_holder_quotient}


## Regression function: truncated Fourier series plus optional polynomial part
@dataclass(frozen=True, eq=False)
class RegressionTask:
    """
    m(x) = scale * (sum_k a_k cos(2 pi <omega_k, x> + phi_k) + sum_j c_j x^{mu_j}).
    """
    spec: HolderSpec
    frequencies: np.ndarray
    amplitudes: np.ndarray
    phases: np.ndarray
    scale: float = 1.0
    poly_indices: np.ndarray = field(default_factory=lambda: np.zeros((0, 1), dtype=np.int64))
    poly_coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        d = self.spec.d
        freqs = np.asarray(self.frequencies, dtype=np.int64).reshape(-1, d)
        poly = np.asarray(self.poly_indices, dtype=np.int64).reshape(-1, d)
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "amplitudes", np.asarray(self.amplitudes, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "phases", np.asarray(self.phases, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "poly_indices", poly)
        object.__setattr__(self, "poly_coefficients", np.asarray(self.poly_coefficients, dtype=np.float64).reshape(-1))
        if not (freqs.shape[0] == self.amplitudes.size == self.phases.size):
            raise ValueError("Fourier frequencies, amplitudes and phases must have equal length")
        if poly.shape[0] != self.poly_coefficients.size:
            raise ValueError("Polynomial indices and coefficients must have equal length")
        if np.any(poly < 0):
            raise ValueError("Polynomial multi-indices must be nonnegative")

    @classmethod
    def zero(cls, spec: HolderSpec) -> "RegressionTask":
        return cls(spec, np.zeros((0, spec.d)), np.zeros(0), np.zeros(0))

    @classmethod
    def polynomial(cls, spec: HolderSpec, terms: List[Tuple[Tuple[int, ...], float]]) -> "RegressionTask":
        """Build a polynomial task from (multi-index, coefficient) pairs."""
        indices = np.array([list(nu) for nu, _ in terms], dtype=np.int64).reshape(-1, spec.d)
        coefs = np.array([c for _, c in terms], dtype=np.float64)
        return cls(spec, np.zeros((0, spec.d)), np.zeros(0), np.zeros(0),
                   poly_indices=indices, poly_coefficients=coefs)

    @classmethod
    def constant(cls, spec: HolderSpec, value: float) -> "RegressionTask":
        return cls.polynomial(spec, [(tuple([0] * spec.d), float(value))])

    @property
    def n_terms(self) -> int:
        return int(self.amplitudes.size + self.poly_coefficients.size)

    # Evaluate the task at one or more points
    def __call__(self, x: np.ndarray) -> np.ndarray:
        """
        Evaluate m.

        Args:
            x (np.ndarray): Points of shape (..., d) or a single point of shape (d,)

        Returns:
            np.ndarray: Values of shape (...)
        """
        return self.derivative(x, tuple([0] * self.spec.d))

    # Analytic partial derivative of the task
    def derivative(self, x: np.ndarray, nu: Tuple[int, ...]) -> np.ndarray:
        """
        Evaluate the partial derivative of order nu.

        Args:
            x (np.ndarray): Points of shape (..., d)
            nu (Tuple[int, ...]): Multi-index of length d

        Returns:
            np.ndarray: Derivative values of shape (...)
        """
        x = np.asarray(x, dtype=np.float64)
        nu_arr = np.asarray(nu, dtype=np.int64)
        order = int(nu_arr.sum())
        value = np.zeros(x.shape[:-1])
        if self.amplitudes.size:
            theta = 2.0 * np.pi * (x @ self.frequencies.T.astype(np.float64)) + self.phases
            weights = self.amplitudes * np.prod(self.frequencies.astype(np.float64) ** nu_arr, axis=1)
            value = value + (2.0 * np.pi) ** order * (np.cos(theta + order * np.pi / 2.0) @ weights)
        if self.poly_coefficients.size:
            for mu, coef in zip(self.poly_indices, self.poly_coefficients):
                if np.any(mu < nu_arr):
                    continue
                falling = np.prod([math.factorial(int(m)) // math.factorial(int(m - k)) for m, k in zip(mu, nu_arr)])
                value = value + coef * falling * np.prod(x ** (mu - nu_arr), axis=-1)
        return self.scale * value

    # Upper bound on sup |m| over the unit cube
    def sup_norm_bound(self) -> float:
        return float(abs(self.scale) * (np.abs(self.amplitudes).sum() + np.abs(self.poly_coefficients).sum()))

    def rescaled(self, factor: float) -> "RegressionTask":
        return RegressionTask(self.spec, self.frequencies, self.amplitudes, self.phases,
                              self.scale * factor, self.poly_indices, self.poly_coefficients)

    def to_record(self) -> Dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "frequencies": self.frequencies.tolist(),
            "amplitudes": self.amplitudes.tolist(),
            "phases": self.phases.tolist(),
            "scale": float(self.scale),
            "poly_indices": self.poly_indices.tolist(),
            "poly_coefficients": self.poly_coefficients.tolist(),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "RegressionTask":
        spec = HolderSpec.from_dict(record["spec"])
        return cls(spec,
                   np.array(record["frequencies"], dtype=np.int64).reshape(-1, spec.d),
                   np.array(record["amplitudes"], dtype=np.float64),
                   np.array(record["phases"], dtype=np.float64),
                   float(record["scale"]),
                   np.array(record.get("poly_indices", []), dtype=np.int64).reshape(-1, spec.d),
                   np.array(record.get("poly_coefficients", []), dtype=np.float64))


## One sequence of the data-generating process
@dataclass(eq=False)
class Prompt:
    """
    n labelled examples and a query covariate, plus the held-out response.
    """
    xs: np.ndarray
    ys: np.ndarray
    query: np.ndarray
    truth_at_query: Optional[float] = None
    query_response: Optional[float] = None
    task: Optional[RegressionTask] = None
    seed: Optional[int] = None

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        self.ys = np.asarray(self.ys, dtype=np.float64).reshape(-1)
        self.query = np.asarray(self.query, dtype=np.float64).reshape(-1)
        if self.xs.shape[0] != self.ys.size or self.ys.size < 1:
            raise ValueError(f"Prompt needs n >= 1 matching covariates and responses, got {self.xs.shape} and {self.ys.shape}")
        if self.query.size != self.xs.shape[1]:
            raise ValueError(f"Query dimension {self.query.size} does not match covariate dimension {self.xs.shape[1]}")

    @property
    def n(self) -> int:
        return int(self.ys.size)

    @property
    def d(self) -> int:
        return int(self.xs.shape[1])

    def to_record(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "n": self.n,
            "d": self.d,
            "xs": self.xs.tolist(),
            "ys": self.ys.tolist(),
            "query": self.query.tolist(),
            "query_response": self.query_response,
            "truth_at_query": self.truth_at_query,
            "task": self.task.to_record() if self.task is not None else None,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Prompt":
        task = RegressionTask.from_record(record["task"]) if record.get("task") else None
        return cls(xs=np.array(record["xs"], dtype=np.float64).reshape(record["n"], record["d"]),
                   ys=np.array(record["ys"], dtype=np.float64),
                   query=np.array(record["query"], dtype=np.float64),
                   truth_at_query=record.get("truth_at_query"),
                   query_response=record.get("query_response"),
                   task=task,
                   seed=record.get("seed"))


@dataclass
class PretrainSet:
    """Γ independent sequences, each with its own task."""
    gamma: int
    prompts: List[Prompt]
    seed: Optional[int] = None

    def __post_init__(self):
        if self.gamma < 1 or len(self.prompts) != self.gamma:
            raise ValueError(f"PretrainSet needs gamma >= 1 prompts, got gamma={self.gamma} with {len(self.prompts)} prompts")

    @property
    def n(self) -> int:
        lengths = {p.n for p in self.prompts}
        if len(lengths) != 1:
            raise ValueError(f"Prompts have mixed lengths: {sorted(lengths)}")
        return lengths.pop()


# Split one seed into independent child streams
def spawn_streams(seed: int, count: int) -> List[np.random.Generator]:
    """
    Create independent generators from one seed.

    Args:
        seed (int): Root seed
        count (int): Number of child streams

    Returns:
        List[np.random.Generator]: One generator per child
    """
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def _grid_resolution(d: int, requested: Optional[int]) -> int:
    resolution = DEFAULT_GRID_RESOLUTION if requested is None else int(requested)
    if resolution < 2:
        raise ValueError(f"Grid resolution must be at least 2, got {resolution}")
    cap = int(math.floor(MAX_GRID_POINTS ** (1.0 / d) + 1e-9))
    return max(2, min(resolution, cap))


def _lattice_offsets(d: int, spacing: float) -> List[np.ndarray]:
    # Directions in {-1,0,1}^d up to sign, then separations along each
    offsets = []
    for direction in product((-1, 0, 1), repeat=d):
        direction = np.array(direction)
        nonzero = np.flatnonzero(direction)
        if nonzero.size == 0 or direction[nonzero[0]] < 0:
            continue
        max_steps = int(math.floor(HOLDER_RADIUS / (spacing * np.linalg.norm(direction)) + 1e-9))
        if max_steps < 1:
            continue
        if max_steps <= MAX_FULL_SEPARATIONS:
            steps = range(1, max_steps + 1)
        else:
            steps = sorted({2 ** j for j in range(int(math.log2(max_steps)) + 1)} | {max_steps})
        offsets.extend(step * direction for step in steps)
    return offsets


def _shifted_difference(values: np.ndarray, offset: np.ndarray) -> np.ndarray:
    ahead, behind = [], []
    for k in offset:
        k = int(k)
        if k >= 0:
            ahead.append(slice(k, None))
            behind.append(slice(0, values.shape[len(ahead) - 1] - k))
        else:
            ahead.append(slice(0, values.shape[len(ahead) - 1] + k))
            behind.append(slice(-k, None))
    return values[tuple(ahead)] - values[tuple(behind)]


# Certify Hölder membership on a grid
def holder_check(task: RegressionTask, grid_resolution: Optional[int] = None) -> HolderReport:
    """
    Report sup |m| and the largest Hölder quotient of the order-underline_alpha derivatives.

    Args:
        task (RegressionTask): Task to verify
        grid_resolution (int): Points per axis (default 512, capped at 10^6 total points)

    Returns:
        HolderReport: max_abs_value and max_holder_quotient over grid pairs within distance 0.1
    """
    spec = task.spec
    resolution = _grid_resolution(spec.d, grid_resolution)
    axis = np.linspace(0.0, 1.0, resolution)
    mesh = np.stack(np.meshgrid(*([axis] * spec.d), indexing="ij"), axis=-1)
    max_abs = float(np.max(np.abs(task(mesh)))) if task.n_terms else 0.0

    spacing = 1.0 / (resolution - 1)
    offsets = _lattice_offsets(spec.d, spacing)
    beta = spec.holder_exponent
    orders = [nu for nu in product(range(spec.underline_alpha + 1), repeat=spec.d) if sum(nu) == spec.underline_alpha]
    max_quotient = 0.0
    if task.n_terms:
        for nu in orders:
            values = task.derivative(mesh, nu)
            for offset in offsets:
                distance = spacing * float(np.linalg.norm(offset))
                diff = np.abs(_shifted_difference(values, offset))
                if diff.size:
                    max_quotient = max(max_quotient, float(diff.max()) / distance ** beta)
    return HolderReport(max_abs_value=max_abs, max_holder_quotient=max_quotient)


def _rescale_into_ball(raw: RegressionTask, grid_resolution: Optional[int]) -> Optional[RegressionTask]:
    report = holder_check(raw, grid_resolution)
    sup_bound = raw.sup_norm_bound()
    binding = max(sup_bound, report.max_holder_quotient)
    if not np.isfinite(binding) or binding <= 0.0:
        return None
    return raw.rescaled(raw.spec.M * (1.0 - 1e-9) / binding)


# Draw a task from the Fourier family P_H
def sample_task(spec: HolderSpec,
                budget: int,
                rng: np.random.Generator,
                grid_resolution: Optional[int] = None,
                max_rejections: int = 50) -> RegressionTask:
    """
    Sample a truncated random Fourier series and rescale it into H(d, alpha, M).

    Args:
        spec (HolderSpec): Target Hölder ball
        budget (int): Number of Fourier terms (0 gives the zero function)
        rng (np.random.Generator): Seeded stream
        grid_resolution (int): Verification grid resolution per axis
        max_rejections (int): Draws allowed before giving up

    Returns:
        RegressionTask: Task whose sup-norm and grid Hölder quotient are at most M

    Raises:
        UnsatisfiableSpecError: If no admissible rescaling was found within the rejection limit
    """
    if budget < 0:
        raise ValueError(f"Term budget must be nonnegative, got {budget}")
    if budget == 0:
        return RegressionTask.zero(spec)
    for attempt in range(max_rejections):
        freqs = rng.integers(-MAX_FREQUENCY, MAX_FREQUENCY + 1, size=(budget, spec.d))
        decay = (1.0 + np.linalg.norm(freqs, axis=1)) ** (-(spec.alpha + 1.0))
        amplitudes = rng.normal(size=budget) * decay
        phases = rng.uniform(0.0, 2.0 * np.pi, size=budget)
        task = _rescale_into_ball(RegressionTask(spec, freqs, amplitudes, phases), grid_resolution)
        if task is not None:
            return task
        logger.debug(f"⚠️ Rejected Fourier draw {attempt + 1}/{max_rejections}")
    raise UnsatisfiableSpecError(
        f"Could not rescale a Fourier task into H(d={spec.d}, alpha={spec.alpha}, M={spec.M}) "
        f"within {max_rejections} draws")


# Draw a random polynomial of total degree at most ceil(alpha)
def sample_polynomial_task(spec: HolderSpec,
                           rng: np.random.Generator,
                           degree: Optional[int] = None,
                           grid_resolution: Optional[int] = None) -> RegressionTask:
    degree = int(math.ceil(spec.alpha)) if degree is None else degree
    indices = [nu for nu in product(range(degree + 1), repeat=spec.d) if sum(nu) <= degree]
    raw = RegressionTask.polynomial(spec, [(nu, float(c)) for nu, c in zip(indices, rng.normal(size=len(indices)))])
    task = _rescale_into_ball(raw, grid_resolution)
    if task is None:
        raise UnsatisfiableSpecError("Random polynomial draw was identically zero")
    return task


# Draw covariates, responses and the query for one sequence
def sample_prompt(task: RegressionTask,
                  cov: CovariateSpec,
                  noise: NoiseSpec,
                  n: int,
                  rng: np.random.Generator,
                  seed: Optional[int] = None) -> Prompt:
    """
    Generate one prompt from the plate model.

    Args:
        task (RegressionTask): Regression function m
        cov (CovariateSpec): Covariate law
        noise (NoiseSpec): Noise law
        n (int): Number of in-context examples
        rng (np.random.Generator): Seeded stream
        seed (int): Optional seed recorded on the prompt

    Returns:
        Prompt: Prompt with ys = m(xs) + noise and the held-out query response
    """
    if n < 1:
        raise ValueError(f"Prompt length must be at least 1, got {n}")
    if cov.d != task.spec.d:
        raise ValueError(f"Covariate dimension {cov.d} does not match task dimension {task.spec.d}")
    xs = cov.sample(n, rng)
    ys = task(xs) + noise.sample(n, rng)
    query = cov.sample(1, rng)[0]
    truth = float(task(query))
    response = truth + float(noise.sample(1, rng)[0])
    return Prompt(xs=xs, ys=ys, query=query, truth_at_query=truth,
                  query_response=response, task=task, seed=seed)


## Prompt generator bundling the specs of one experiment
class PromptGenerator:
    """
    Draws tasks from a task family and turns them into prompts and pretraining sets.
    """

    def __init__(self,
                 holder: HolderSpec,
                 cov: Optional[CovariateSpec] = None,
                 noise: Optional[NoiseSpec] = None,
                 family: str = "fourier",
                 budget: int = 8,
                 grid_resolution: Optional[int] = None):
        """
        Initialize the PromptGenerator.

        Args:
            holder (HolderSpec): Hölder ball of the tasks
            cov (CovariateSpec): Covariate law (uniform by default)
            noise (NoiseSpec): Noise law (half width 0.5 by default)
            family (str): One of fourier, constant, polynomial
            budget (int): Fourier term count
            grid_resolution (int): Hölder verification grid resolution
        """
        if family not in TASK_FAMILIES:
            raise ValueError(f"Unsupported task family: {family}")
        self.holder = holder
        self.cov = cov or CovariateSpec.uniform(holder.d)
        self.noise = noise or NoiseSpec()
        self.family = family
        self.budget = budget
        self.grid_resolution = grid_resolution

    # Draw one task from the configured family
    def task(self, rng: np.random.Generator) -> RegressionTask:
        if self.family == "constant":
            return RegressionTask.constant(self.holder, rng.uniform(-self.holder.M, self.holder.M))
        if self.family == "polynomial":
            return sample_polynomial_task(self.holder, rng, grid_resolution=self.grid_resolution)
        return sample_task(self.holder, self.budget, rng, self.grid_resolution)

    # Draw a fresh task and one prompt of length n from it
    def prompt(self, n: int, rng: np.random.Generator, seed: Optional[int] = None) -> Prompt:
        return sample_prompt(self.task(rng), self.cov, self.noise, n, rng, seed=seed)

    # Draw independent prompts, each from its own child stream
    def prompts(self, n: int, count: int, seed: int) -> List[Prompt]:
        """
        Draw count independent prompts.

        Args:
            n (int): Prompt length
            count (int): Number of prompts
            seed (int): Root seed split into one child stream per prompt

        Returns:
            List[Prompt]: Prompts in stream order
        """
        return [self.prompt(n, stream, seed=seed) for stream in spawn_streams(seed, count)]

    def pretrain_set(self, n: int, gamma: int, seed: int) -> PretrainSet:
        return PretrainSet(gamma=gamma, prompts=self.prompts(n, gamma, seed), seed=seed)


# Backward compatibility wrapper around PromptGenerator
def sample_pretrain_set(holder: HolderSpec,
                        cov: CovariateSpec,
                        noise: NoiseSpec,
                        n: int,
                        gamma: int,
                        seed: int,
                        family: str = "fourier",
                        budget: int = 8) -> PretrainSet:
    """Draw Γ sequences with independent tasks and streams."""
    return PromptGenerator(holder, cov, noise, family, budget).pretrain_set(n, gamma, seed)
