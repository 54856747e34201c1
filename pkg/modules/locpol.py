"""
locpol.py

Provides the truncated local polynomial estimator, the kernel-weighted monomial basis
and its spectral diagnostics using a class-based approach.
"""
from typing import List, Dict, Optional, Any, Tuple
from dataclasses import dataclass
from itertools import product
import logging
import math

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import comb, factorial

from modules.datagen import Prompt
from modules.errors import NonFiniteInputError

logger = logging.getLogger(__name__)

DEGENERACY_THRESHOLD = 1e-8
DEFAULT_RIDGE_EPS = 1e-8
FIT_COLUMNS = ["n", "h", "p", "lambda_min", "lambda_max", "effective_points", "estimate", "truth", "squared_error"]


# Bandwidth h = n^{-1/(2 alpha + d)}
def default_bandwidth(n: int, alpha: float, d: int) -> float:
    if n < 1:
        raise ValueError(f"Sample size must be at least 1, got {n}")
    return float(n ** (-1.0 / (2.0 * alpha + d)))


# Degree p = ceil(alpha)
def default_degree(alpha: float) -> int:
    return int(math.ceil(alpha))


## Kernel K(x) = (1 - ||x||_1)_+^2 at bandwidth h
@dataclass(frozen=True)
class KernelSpec:
    """
    Squared-L1 kernel with its bounds c_K, C_K and Lipschitz constant L_K.
    """
    h: float
    d: int = 1
    kind: str = "squared_l1"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"Bandwidth must be positive, got {self.h}")
        if self.kind != "squared_l1":
            raise ValueError(f"Unsupported kernel kind: {self.kind}")

    @property
    def c_K(self) -> float:
        """Largest c with K >= c on [-c, c]^d."""
        d = self.d
        return ((2 * d + 1) - math.sqrt(4 * d + 1)) / (2 * d * d)

    @property
    def C_K(self) -> float:
        return 1.0

    @property
    def L_K(self) -> float:
        """Euclidean Lipschitz constant of K."""
        return 2.0 * math.sqrt(self.d)


## Monomial basis of total degree <= p
@dataclass(frozen=True)
class BasisSpec:
    """
    Multi-indices of total degree at most p in increasing lexicographic order.
    """
    d: int
    p: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"Basis dimension must be positive, got {self.d}")
        if self.p < 0:
            raise ValueError(f"Basis degree must be nonnegative, got {self.p}")

    @property
    def D(self) -> int:
        return int(comb(self.d + self.p, self.p, exact=True))

    @property
    def multi_indices(self) -> List[Tuple[int, ...]]:
        return [nu for nu in product(range(self.p + 1), repeat=self.d) if sum(nu) <= self.p]

    def index_array(self) -> np.ndarray:
        return np.array(self.multi_indices, dtype=np.int64).reshape(self.D, self.d)


## Weighted least-squares fit and its diagnostics
@dataclass
class LocPolFit:
    w_star: np.ndarray
    estimate: float
    lambda_min: float
    lambda_max: float
    effective_points: int
    solved_by: str
    unclamped: float
    n: int
    h: float
    p: int
    truth: Optional[float] = None

    @property
    def squared_error(self) -> float:
        if self.truth is None:
            return float("nan")
        return float((self.estimate - self.truth) ** 2)

    # Row for the diagnostics CSV
    def to_row(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "h": self.h,
            "p": self.p,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "effective_points": self.effective_points,
            "estimate": self.estimate,
            "truth": float("nan") if self.truth is None else self.truth,
            "squared_error": self.squared_error,
        }


# Evaluate K_h at one or more offsets
def kernel_eval(x: np.ndarray, h: float) -> np.ndarray:
    """
    Evaluate K_h(x) = (1 - ||x/h||_1)_+^2 / h^d.

    Args:
        x (np.ndarray): Offsets of shape (..., d)
        h (float): Bandwidth

    Returns:
        np.ndarray: Kernel values of shape (...)
    """
    if not h > 0:
        raise ValueError(f"Bandwidth must be positive, got {h}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = x.shape[-1]
    l1 = np.abs(x / h).sum(axis=-1)
    return np.maximum(1.0 - l1, 0.0) ** 2 / h ** d


# Evaluate P_h at one or more points
def monomial_basis(x: np.ndarray, spec: BasisSpec, h: float) -> np.ndarray:
    """
    Evaluate the scaled monomial basis x^nu / (nu! h^{|nu|}).

    Args:
        x (np.ndarray): Points of shape (..., d)
        spec (BasisSpec): Basis definition
        h (float): Bandwidth

    Returns:
        np.ndarray: Basis values of shape (..., D), constant term first
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != spec.d:
        raise ValueError(f"Point dimension {x.shape[-1]} does not match basis dimension {spec.d}")
    nus = spec.index_array()
    denom = np.prod(factorial(nus), axis=1) * h ** nus.sum(axis=1)
    powers = np.prod(x[..., None, :] ** nus, axis=-1)
    return powers / denom


# Build the kernel-weighted design X_tilde and response Y_tilde
def build_weighted_system(prompt: Prompt, kernel: KernelSpec, basis: BasisSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Build the weighted least-squares system centred at the prompt's query.

    Args:
        prompt (Prompt): In-context examples and query
        kernel (KernelSpec): Kernel and bandwidth
        basis (BasisSpec): Monomial basis

    Returns:
        Tuple[np.ndarray, np.ndarray]: X_tilde of shape (n, D) and Y_tilde of shape (n,)
    """
    diffs = prompt.xs - prompt.query
    weights = np.sqrt(kernel_eval(diffs, kernel.h) / prompt.n)
    X_tilde = weights[:, None] * monomial_basis(diffs, basis, kernel.h)
    Y_tilde = weights * prompt.ys
    return X_tilde, Y_tilde


# Eigenvalue range of the Gram matrix
def spectral_bounds(X_tilde: np.ndarray) -> Tuple[float, float]:
    """
    Compute the extreme eigenvalues of X_tilde^T X_tilde with a symmetric eigensolver.

    Args:
        X_tilde (np.ndarray): Design matrix of shape (n, D)

    Returns:
        Tuple[float, float]: (lambda_min, lambda_max)
    """
    X_tilde = np.atleast_2d(np.asarray(X_tilde, dtype=np.float64))
    gram = X_tilde.T @ X_tilde
    eigenvalues = linalg.eigh(gram, eigvals_only=True)
    return float(eigenvalues[0]), float(eigenvalues[-1])


# Least squares by QR, independent of the normal equations
def qr_solve(X_tilde: np.ndarray, Y_tilde: np.ndarray) -> np.ndarray:
    Q, R = linalg.qr(X_tilde, mode="economic")
    return linalg.solve_triangular(R, Q.T @ Y_tilde)


## Local polynomial estimator with degeneracy handling
class LocPolEstimator:
    """
    Solves the kernel-weighted least-squares problem and truncates the intercept.
    """

    def __init__(self,
                 ridge_eps: float = DEFAULT_RIDGE_EPS,
                 degeneracy_threshold: float = DEGENERACY_THRESHOLD):
        """
        Initialize the LocPolEstimator.

        Args:
            ridge_eps (float): Ridge added to the Gram matrix for degenerate designs
            degeneracy_threshold (float): lambda_min at or below which the ridge path is used
        """
        if ridge_eps < 0:
            raise ValueError(f"ridge_eps must be nonnegative, got {ridge_eps}")
        self.ridge_eps = ridge_eps
        self.degeneracy_threshold = degeneracy_threshold

    # Fit the truncated local polynomial estimator on one prompt
    def fit(self,
            prompt: Prompt,
            kernel: KernelSpec,
            basis: BasisSpec,
            M: float,
            ridge_eps: Optional[float] = None) -> LocPolFit:
        """
        Fit the M-truncated local polynomial estimator.

        Args:
            prompt (Prompt): In-context examples and query
            kernel (KernelSpec): Kernel and bandwidth
            basis (BasisSpec): Monomial basis
            M (float): Truncation level
            ridge_eps (float): Optional override of the ridge used on degenerate designs

        Returns:
            LocPolFit: Solution, truncated estimate and spectral diagnostics

        Raises:
            NonFiniteInputError: If the prompt contains NaN or infinite values
        """
        if not M > 0:
            raise ValueError(f"Truncation level M must be positive, got {M}")
        ridge = self.ridge_eps if ridge_eps is None else ridge_eps
        if ridge < 0:
            raise ValueError(f"ridge_eps must be nonnegative, got {ridge}")
        if not (np.all(np.isfinite(prompt.xs)) and np.all(np.isfinite(prompt.ys)) and np.all(np.isfinite(prompt.query))):
            raise NonFiniteInputError("Prompt contains non-finite covariates, responses or query")

        X_tilde, Y_tilde = build_weighted_system(prompt, kernel, basis)
        lambda_min, lambda_max = spectral_bounds(X_tilde)
        gram = X_tilde.T @ X_tilde
        rhs = X_tilde.T @ Y_tilde
        if lambda_min > self.degeneracy_threshold:
            w_star = linalg.solve(gram, rhs, assume_a="pos")
            solved_by = "normal_equations"
        else:
            if ridge > 0:
                w_star = linalg.solve(gram + ridge * np.eye(basis.D), rhs, assume_a="sym")
            else:
                w_star = linalg.lstsq(gram, rhs)[0]
            solved_by = "degenerate_fallback"
            logger.debug(f"⚠️ Degenerate design (lambda_min={lambda_min:.3e}), ridge fallback used")

        unclamped = float(w_star[0])
        effective = int(np.count_nonzero(kernel_eval(prompt.xs - prompt.query, kernel.h) > 0))
        return LocPolFit(w_star=w_star,
                         estimate=float(np.clip(unclamped, -M, M)),
                         lambda_min=lambda_min,
                         lambda_max=lambda_max,
                         effective_points=effective,
                         solved_by=solved_by,
                         unclamped=unclamped,
                         n=prompt.n,
                         h=kernel.h,
                         p=basis.p,
                         truth=prompt.truth_at_query)


## Callable predictor f_LocPol(D_n, X_{n+1})
class LocPolPredictor:
    """
    Wraps the estimator with the default bandwidth and degree for a Hölder class.
    """

    def __init__(self,
                 alpha: float,
                 M: float,
                 d: int,
                 h: Optional[float] = None,
                 p: Optional[int] = None,
                 estimator: Optional[LocPolEstimator] = None):
        self.alpha = alpha
        self.M = M
        self.d = d
        self.h = h
        self.basis = BasisSpec(d=d, p=default_degree(alpha) if p is None else p)
        self.estimator = estimator or locpol_estimator

    def kernel_for(self, n: int) -> KernelSpec:
        h = self.h if self.h is not None else default_bandwidth(n, self.alpha, self.d)
        return KernelSpec(h=h, d=self.d)

    def fit(self, prompt: Prompt) -> LocPolFit:
        return self.estimator.fit(prompt, self.kernel_for(prompt.n), self.basis, self.M)

    def __call__(self, prompt: Prompt) -> float:
        return self.fit(prompt).estimate


# Diagnostics table from a list of fits
def fit_rows_frame(fits: List[LocPolFit]) -> pd.DataFrame:
    return pd.DataFrame([fit.to_row() for fit in fits], columns=FIT_COLUMNS)


# Global instance for easy access
locpol_estimator = LocPolEstimator()


def fit_locpol(prompt: Prompt,
               kernel: KernelSpec,
               basis: BasisSpec,
               M: float,
               ridge_eps: float = DEFAULT_RIDGE_EPS) -> LocPolFit:
    """Backward compatibility function."""
    return locpol_estimator.fit(prompt, kernel, basis, M, ridge_eps)
