"""
construction.py

Provides the explicit transformer whose forward pass runs kernel-weighted least squares
by gradient descent, together with the inexact gradient descent reference optimizer,
using a class-based approach.
"""
from typing import List, Dict, Optional, Any, Tuple, Callable
from dataclasses import dataclass, field, asdict
import logging
import math

import numpy as np

from modules.datagen import Prompt
from modules.errors import InfeasibleConstructionError, LayoutMismatchError
from modules.locpol import (BasisSpec, KernelSpec, build_weighted_system, default_bandwidth,
                            default_degree, spectral_bounds)
from modules.relu_builder import MULTIPROD_INNER_BOX, build_square_stages, relu_builder
from modules.transformer import ArchSpec, BlockParams, TransformerParams, block_forward, embed, read

logger = logging.getLogger(__name__)

PREPROCESS_BLOCKS = 3
DEFAULT_T_CAP = 5000
DEFAULT_CALIBRATION_PROMPTS = 50
SQUARE_LEVELS = 1
SPECTRUM_FLOOR = 1e-6

GradientInjector = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


## Column bookkeeping of the register matrix (0-indexed)
@dataclass(frozen=True)
class RegisterLayout:
    """
    Columns: x_raw (d), y, x_centered (d), sqrt_kernel, basis (D), response, weight (D), ones, qflag.
    """
    d: int
    D: int

    @property
    def x_raw(self) -> slice:
        return slice(0, self.d)

    @property
    def y(self) -> int:
        return self.d

    @property
    def x_centered(self) -> slice:
        return slice(self.d + 1, 2 * self.d + 1)

    @property
    def sqrt_kernel(self) -> int:
        return 2 * self.d + 1

    @property
    def basis(self) -> slice:
        return slice(2 * self.d + 2, 2 * self.d + 2 + self.D)

    @property
    def response(self) -> int:
        return 2 * self.d + self.D + 2

    @property
    def weight(self) -> slice:
        return slice(2 * self.d + self.D + 3, 2 * self.d + 2 * self.D + 3)

    @property
    def ones(self) -> int:
        return 2 * self.d + 2 * self.D + 3

    @property
    def qflag(self) -> int:
        return 2 * self.d + 2 * self.D + 4

    @property
    def d_e(self) -> int:
        return 2 * self.d + 2 * self.D + 5

    def columns(self, span: slice) -> List[int]:
        return list(range(span.start, span.stop))

    # Check that spans are disjoint and cover [0, d_e)
    def validate(self) -> None:
        spans = [(self.x_raw.start, self.x_raw.stop), (self.y, self.y + 1),
                 (self.x_centered.start, self.x_centered.stop), (self.sqrt_kernel, self.sqrt_kernel + 1),
                 (self.basis.start, self.basis.stop), (self.response, self.response + 1),
                 (self.weight.start, self.weight.stop), (self.ones, self.ones + 1), (self.qflag, self.qflag + 1)]
        cursor = 0
        for start, stop in spans:
            if start != cursor or stop <= start:
                raise LayoutMismatchError(f"Register spans are not contiguous at column {start}")
            cursor = stop
        if cursor != self.d_e:
            raise LayoutMismatchError(f"Register spans cover {cursor} columns, expected d_e={self.d_e}")

    def check_arch(self, arch: ArchSpec) -> None:
        if arch.d_e != self.d_e or arch.d != self.d:
            raise LayoutMismatchError(f"Architecture d_e={arch.d_e}, d={arch.d} does not match layout d_e={self.d_e}, d={self.d}")


## Build-time constants of the explicit transformer
@dataclass(frozen=True)
class ConstructionConfig:
    n: int
    d: int
    alpha: float
    M: float
    p: int
    h: float
    L0: float
    T: int
    eta: float
    c_lo: float
    c_hi: float
    T_cap: int = DEFAULT_T_CAP

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"Construction needs n >= 2, got {self.n}")
        if not 0 < self.h <= 1:
            raise ValueError(f"Bandwidth must lie in (0, 1], got {self.h}")
        if self.T < 1 or self.L0 <= 0 or self.eta <= 0:
            raise ValueError(f"Construction needs T >= 1, L0 > 0, eta > 0, got T={self.T}, L0={self.L0}, eta={self.eta}")
        if not 0 < self.c_lo <= self.c_hi:
            raise ValueError(f"Spectrum estimates must satisfy 0 < c_lo <= c_hi, got {self.c_lo}, {self.c_hi}")

    @property
    def basis(self) -> BasisSpec:
        return BasisSpec(d=self.d, p=self.p)

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(h=self.h, d=self.d)

    @property
    def D(self) -> int:
        return self.basis.D

    @property
    def layout(self) -> RegisterLayout:
        return RegisterLayout(d=self.d, D=self.D)

    @property
    def query_kernel_value(self) -> float:
        """n^{-1/2} h^{-d/2}, the sqrt-kernel entry of the query row."""
        return float(self.n ** -0.5 * self.h ** (-self.d / 2.0))

    @property
    def box(self) -> float:
        """Half width covering every factor fed to the product stages."""
        return max(2.0 * (self.M + 1.0) / self.h, self.query_kernel_value, 1.0)

    @property
    def stages_per_square(self) -> int:
        return 7 * (self.p + 1) * max(1, int(math.ceil(self.L0 * math.log(self.n))))

    @property
    def xi(self) -> float:
        """30 p (2M+2)^{p+1} n^{-7(p+1)L0+2}."""
        if self.p == 0:
            return 0.0
        log_xi = (math.log(30.0 * self.p) + (self.p + 1) * math.log(2.0 * self.M + 2.0)
                  + (-7.0 * (self.p + 1) * self.L0 + 2.0) * math.log(self.n))
        return math.exp(log_xi) if log_xi < 700 else float("inf")

    @property
    def product_steps(self) -> int:
        return sum(sum(nu) for nu in self.basis.multi_indices) + 1

    @property
    def basis_block_count(self) -> int:
        return 1 + 2 * self.stages_per_square * self.product_steps

    @property
    def total_blocks(self) -> int:
        return PREPROCESS_BLOCKS + self.basis_block_count + self.T + 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class GdTrace:
    iterates: np.ndarray
    gradient_errors: np.ndarray

    @property
    def T(self) -> int:
        return int(self.iterates.shape[0] - 1)


## Summary written next to a constructed checkpoint
@dataclass
class BuildReport:
    xi: float
    eta: float
    T: int
    L0: float
    c_lo: float
    c_hi: float
    preprocess_blocks: int
    basis_blocks: int
    gd_blocks: int
    total_blocks: int
    d_e: int
    d_ffn_used: int
    d_ffn_formula: int
    B_used: float
    B_formula: float
    max_abs_param: float
    block_constant: float
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ForwardTrace:
    Z_pre: np.ndarray
    Z_basis: np.ndarray
    w_iterates: np.ndarray
    Z_final: np.ndarray
    output: float


# Smallest integer L0 >= 1 with xi <= n^{-3}
def default_L0(n: int, p: int, M: float) -> int:
    if n < 2:
        raise ValueError(f"L0 needs n >= 2, got {n}")
    if p == 0:
        return 1
    needed = (5.0 + (math.log(30.0 * p) + (p + 1) * math.log(2.0 * M + 2.0)) / math.log(n)) / (7.0 * (p + 1))
    return max(1, int(math.ceil(needed - 1e-12)))


# GD step count T = min(ceil(4 (c_hi/c_lo)^2 log n), T_cap)
def default_T(n: int, c_lo: float, c_hi: float, T_cap: int = DEFAULT_T_CAP) -> int:
    return max(1, min(int(math.ceil(4.0 * (c_hi / c_lo) ** 2 * math.log(n))), int(T_cap)))


# Median spectrum of the weighted design over a calibration batch
def calibrate_spectrum(prompts: List[Prompt], kernel: KernelSpec, basis: BasisSpec) -> Tuple[float, float]:
    """
    Estimate (c_lo, c_hi) as medians of lambda_min and lambda_max of X_tilde^T X_tilde.

    Args:
        prompts (List[Prompt]): Calibration prompts
        kernel (KernelSpec): Kernel at the construction bandwidth
        basis (BasisSpec): Monomial basis

    Returns:
        Tuple[float, float]: (c_lo, c_hi)
    """
    if not prompts:
        raise ValueError("Calibration needs at least one prompt")
    bounds = np.array([spectral_bounds(build_weighted_system(prompt, kernel, basis)[0]) for prompt in prompts])
    c_lo, c_hi = float(np.median(bounds[:, 0])), float(np.median(bounds[:, 1]))
    if not c_hi > 0:
        raise InfeasibleConstructionError(f"Calibration prompts carry no kernel mass at h={kernel.h:.4g}")
    if c_lo < SPECTRUM_FLOOR * c_hi:
        logger.warning(f"⚠️ Median lambda_min {c_lo:.3e} is degenerate; flooring at {SPECTRUM_FLOOR:g} * c_hi")
        c_lo = SPECTRUM_FLOOR * c_hi
    return c_lo, c_hi


# Assemble a ConstructionConfig from calibration data and overrides
def make_construction_config(n: int,
                             d: int,
                             alpha: float,
                             M: float,
                             calibration_prompts: Optional[List[Prompt]] = None,
                             c_lo: Optional[float] = None,
                             c_hi: Optional[float] = None,
                             T: Optional[int] = None,
                             L0: Optional[float] = None,
                             eta: Optional[float] = None,
                             T_cap: int = DEFAULT_T_CAP,
                             h: Optional[float] = None,
                             p: Optional[int] = None) -> ConstructionConfig:
    """
    Resolve every construction constant.

    Args:
        n (int): Prompt length the transformer serves
        d (int): Covariate dimension
        alpha (float): Smoothness
        M (float): Amplitude bound and readout clamp
        calibration_prompts (List[Prompt]): Prompts for the spectrum estimates
        c_lo (float): Explicit lower spectrum estimate
        c_hi (float): Explicit upper spectrum estimate
        T (int): GD step override
        L0 (float): Depth multiplier override
        eta (float): Step size override; sets c_hi = 1/(2 eta)
        T_cap (int): Cap on the automatic T
        h (float): Bandwidth override
        p (int): Degree override

    Returns:
        ConstructionConfig: Resolved configuration
    """
    p = default_degree(alpha) if p is None else p
    h = default_bandwidth(n, alpha, d) if h is None else h
    if c_lo is None or c_hi is None:
        if not calibration_prompts:
            raise ValueError("Either calibration prompts or both spectrum estimates are required")
        est_lo, est_hi = calibrate_spectrum(calibration_prompts, KernelSpec(h=h, d=d), BasisSpec(d=d, p=p))
        c_lo = est_lo if c_lo is None else c_lo
        c_hi = est_hi if c_hi is None else c_hi
    if eta is not None:
        c_hi = 1.0 / (2.0 * eta)
        c_lo = min(c_lo, c_hi)
    eta = 1.0 / (2.0 * c_hi)
    T = default_T(n, c_lo, c_hi, T_cap) if T is None else T
    L0 = default_L0(n, p, M) if L0 is None else L0
    return ConstructionConfig(n=n, d=d, alpha=alpha, M=M, p=p, h=h, L0=L0, T=T, eta=eta,
                              c_lo=c_lo, c_hi=c_hi, T_cap=T_cap)


# Exact least-squares gradient 2 (X^T X w - X^T Y)
def exact_gradient(X_tilde: np.ndarray, Y_tilde: np.ndarray, w: np.ndarray) -> np.ndarray:
    return 2.0 * (X_tilde.T @ (X_tilde @ w) - X_tilde.T @ Y_tilde)


# Injector adding a uniformly oriented error of norm eps
def bounded_noise_injector(eps: float, rng: np.random.Generator) -> GradientInjector:
    def inject(t: int, w: np.ndarray, grad: np.ndarray) -> np.ndarray:
        direction = rng.normal(size=grad.shape)
        norm = np.linalg.norm(direction)
        return grad + (eps * direction / norm if norm > 0 else 0.0)
    return inject


# Injector returning the gradient the GD attention block computes
def register_gradient_injector(X_check: np.ndarray, Y_check: np.ndarray, a: np.ndarray, b: float) -> GradientInjector:
    """
    g = 2 (X_check^T X_check w - X_check^T Y_check + (w^T a - b) a).
    """
    def inject(t: int, w: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return 2.0 * (X_check.T @ (X_check @ w) - X_check.T @ Y_check + (w @ a - b) * a)
    return inject


def gd_error_bound(C1: float, C2: float, T: int, eps: float, w_star_norm: float) -> float:
    """exp(-C1 T / (2 C2)) ||w*|| + T eps / C2."""
    return math.exp(-C1 * T / (2.0 * C2)) * w_star_norm + T * eps / C2


# Gradient descent with an optional gradient perturbation
def inexact_gd_reference(X_tilde: np.ndarray,
                         Y_tilde: np.ndarray,
                         T: int,
                         eta: float,
                         error_injector: Optional[GradientInjector] = None) -> GdTrace:
    """
    Run w_{t+1} = w_t - eta g_t from w_0 = 0.

    Args:
        X_tilde (np.ndarray): Design (n, D)
        Y_tilde (np.ndarray): Response (n,)
        T (int): Number of steps
        eta (float): Step size 1/C2
        error_injector (GradientInjector): Maps (t, w_t, exact gradient) to g_t

    Returns:
        GdTrace: Iterates w_0..w_T and ||g_t - grad f(w_t)||_2 per step
    """
    if T < 0:
        raise ValueError(f"Step count must be nonnegative, got {T}")
    w = np.zeros(X_tilde.shape[1])
    iterates = [w.copy()]
    errors = []
    for t in range(T):
        grad = exact_gradient(X_tilde, Y_tilde, w)
        g = grad if error_injector is None else error_injector(t, w, grad)
        errors.append(float(np.linalg.norm(g - grad)))
        w = w - eta * g
        iterates.append(w.copy())
    return GdTrace(iterates=np.array(iterates), gradient_errors=np.array(errors))


# Split a register matrix into the quantities the GD blocks see
def register_quantities(Z: np.ndarray, layout: RegisterLayout) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Return (X_check, Y_check, a, b): data-row basis and response plus the query-row leftovers."""
    return Z[:-1, layout.basis], Z[:-1, layout.response], Z[-1, layout.basis], float(Z[-1, layout.response])


def _largest(*arrays: np.ndarray) -> float:
    return max(float(np.max(np.abs(a))) if a.size else 0.0 for a in arrays)


## Builder for the explicit local polynomial transformer
class LocPolTransformerBuilder:
    """
    Wires preprocessing, basis, gradient descent and transfer blocks into one transformer.
    """

    # FFN-only block replacing the out columns by a one-hidden-layer map of the register
    def _replacement_block(self, d_e: int, W1: np.ndarray, b1: np.ndarray, out_cols: List[int],
                           W2: np.ndarray, b2: np.ndarray) -> BlockParams:
        """
        Embed Z[out] <- W2 ReLU(W1 Z + b1) + b2 as a residual block via residual absorption.

        Args:
            d_e (int): Register width
            W1 (np.ndarray): Hidden weights over the full register (m, d_e)
            b1 (np.ndarray): Hidden bias (m,)
            out_cols (List[int]): Columns replaced by the map
            W2 (np.ndarray): Output weights (len(out_cols), m)
            b2 (np.ndarray): Output bias (len(out_cols),)

        Returns:
            BlockParams: Block with zero attention and FFN width m + 2 len(out_cols)
        """
        m, k = W1.shape[0], len(out_cols)
        rewrite = relu_builder.absorb_residual(W1[:, out_cols], W2, b1, b2, B=max(1.0, _largest(W1, W2, b1, b2)))
        block = BlockParams.zeros(d_e, m + 2 * k)
        block.W1[:m, :] = W1
        block.W1[m:, out_cols] = rewrite.W1p[m:]
        block.W2[out_cols, :] = rewrite.W2p
        block.b1[:] = rewrite.b1p
        block.b2[out_cols] = rewrite.b2p
        return block

    # Three blocks producing centred covariates and the sqrt-kernel column
    def build_preprocess_blocks(self, cfg: ConstructionConfig) -> List[BlockParams]:
        """
        Build the preprocessing blocks.

        After them, data rows hold (x_i - x_q)/h and sqrt(K_h(x_i - x_q)/n); the query row holds 0
        and n^{-1/2} h^{-d/2}; the ones column is 1 everywhere.

        Args:
            cfg (ConstructionConfig): Construction constants

        Returns:
            List[BlockParams]: Blocks of FFN widths d, 2d and 2d+2
        """
        lay, d, h = cfg.layout, cfg.d, cfg.h
        lay.validate()
        xs, xc = lay.columns(lay.x_raw), lay.columns(lay.x_centered)

        first = BlockParams.zeros(lay.d_e, d)
        for j in range(d):
            first.W1[j, xs[j]] = 1.0
            first.W1[j, lay.qflag] = 1.0
            first.W2[xc[j], j] = 1.0
        first.b1[:] = -1.0
        first.b2[lay.ones] = 1.0

        second = BlockParams.zeros(lay.d_e, 2 * d)
        second.Q[lay.ones, lay.ones] = 1.0
        second.Q[lay.qflag, lay.ones] = -1.0
        second.K[lay.ones, lay.ones] = 1.0
        for j in range(d):
            second.V[xc[j], xc[j]] = 1.0
            second.W1[j, xs[j]], second.W1[j, xc[j]] = 1.0 / h, -1.0 / h
            second.W1[d + j, xs[j]], second.W1[d + j, xc[j]] = -1.0 / h, 1.0 / h
        second.W2[lay.sqrt_kernel, :] = -1.0
        second.b2[lay.sqrt_kernel] = 1.0

        third = BlockParams.zeros(lay.d_e, 2 * d + 2)
        third.W1[0, lay.sqrt_kernel] = 1.0
        third.W1[1, lay.sqrt_kernel] = 1.0
        third.b1[1] = d / h
        third.W2[lay.sqrt_kernel, 0] = cfg.query_kernel_value
        third.W2[lay.sqrt_kernel, 1] = -1.0
        third.b2[lay.sqrt_kernel] = d / h
        for j in range(d):
            third.W1[2 + j, xs[j]], third.W1[2 + j, xc[j]] = 1.0 / h, -1.0 / h
            third.b1[2 + j] = 1.0 / h
            third.W1[2 + d + j, xc[j]] = 1.0
            third.W2[xc[j], 2 + j] = 1.0
            third.W2[xc[j], 2 + d + j] = -1.0
            third.b2[xc[j]] = -1.0 / h
        return [first, second, third]

    def _product_blocks(self, cfg: ConstructionConfig, u_col: int, u_scale: float, v_col: int, v_scale: float,
                        out_col: int, final_scale: float) -> List[BlockParams]:
        # out <- final_scale * (u_scale u)(v_scale v) by two sequential sawtooth squares
        lay, c = cfg.layout, MULTIPROD_INNER_BOX
        sc1, sc2 = lay.columns(lay.weight)[:2]
        squares = build_square_stages(SQUARE_LEVELS, cfg.stages_per_square)
        last = len(squares) - 1
        blocks = []
        for sign in (1.0, -1.0):
            for index, stage in enumerate(squares):
                m = stage.hidden
                W1 = np.zeros((m, lay.d_e))
                if index == 0:
                    W1[:, u_col] += stage.W1[:, 0] * u_scale / (2.0 * c)
                    W1[:, v_col] += stage.W1[:, 0] * sign * v_scale / (2.0 * c)
                else:
                    W1[:, sc1] = stage.W1[:, 0]
                    W1[:, sc2 if sign > 0 else out_col] = stage.W1[:, 1]
                b1 = stage.b1.copy()
                if sign > 0:
                    out_cols = [sc1, sc2]
                    if index < last:
                        W2, b2 = stage.W2, stage.b2
                    else:
                        W2 = np.vstack([np.zeros(m), stage.W2[-1]])
                        b2 = np.array([0.0, stage.b2[-1]])
                elif index < last:
                    out_cols = [sc1, out_col]
                    W2, b2 = stage.W2, stage.b2
                else:
                    # out = final_scale c^2 (acc_a - acc_b); scratch cleared
                    pair = np.zeros((2, lay.d_e))
                    pair[0, sc2], pair[1, sc2] = 1.0, -1.0
                    W1, b1 = np.vstack([W1, pair]), np.concatenate([b1, [0.0, 0.0]])
                    scale = final_scale * c * c
                    out_row = scale * np.concatenate([-stage.W2[-1], [1.0, -1.0]])
                    out_cols = [out_col, sc1, sc2]
                    W2 = np.vstack([out_row, np.zeros(m + 2), np.zeros(m + 2)])
                    b2 = np.array([-scale * stage.b2[-1], 0.0, 0.0])
                blocks.append(self._replacement_block(lay.d_e, W1, b1, out_cols, W2, b2))
        return blocks

    # Blocks writing the kernel-weighted basis and response
    def build_basis_blocks(self, cfg: ConstructionConfig) -> List[BlockParams]:
        """
        Build the gate block and the product-stage blocks filling the basis and response spans.

        Args:
            cfg (ConstructionConfig): Construction constants

        Returns:
            List[BlockParams]: Blocks with zero attention

        Raises:
            InfeasibleConstructionError: If xi > 1 at the configured L0
        """
        if cfg.xi > 1.0:
            raise InfeasibleConstructionError(
                f"xi={cfg.xi:.3e} > 1 at L0={cfg.L0}; raise L0 (smallest admissible: {default_L0(cfg.n, cfg.p, cfg.M)})")
        lay, C = cfg.layout, cfg.box
        basis_cols, xc = lay.columns(lay.basis), lay.columns(lay.x_centered)
        gate_W1 = np.zeros((1, lay.d_e))
        gate_W1[0, lay.sqrt_kernel] = 1.0
        gate_W1[0, lay.qflag] = -cfg.query_kernel_value
        blocks = [self._replacement_block(lay.d_e, gate_W1, np.zeros(1), [basis_cols[0]], np.ones((1, 1)), np.zeros(1))]

        for slot, nu in enumerate(cfg.basis.multi_indices):
            if slot == 0:
                continue
            factors = [j for j, power in enumerate(nu) for _ in range(power)]
            target = C ** (len(factors) + 1) / float(np.prod([math.factorial(v) for v in nu]))
            for step, j in enumerate(factors):
                first, final = step == 0, step == len(factors) - 1
                blocks += self._product_blocks(cfg,
                                               u_col=basis_cols[0] if first else basis_cols[slot],
                                               u_scale=1.0 / C if first else 1.0,
                                               v_col=xc[j], v_scale=1.0 / C,
                                               out_col=basis_cols[slot],
                                               final_scale=target if final else 1.0)
        blocks += self._product_blocks(cfg, u_col=basis_cols[0], u_scale=1.0 / C, v_col=lay.y, v_scale=1.0 / C,
                                       out_col=lay.response, final_scale=C * C)
        return blocks

    # Attention block performing one gradient step on the w span
    def build_gd_block(self, cfg: ConstructionConfig) -> BlockParams:
        """
        Build the block computing w <- w - eta g with g = 2(X^T X w - X^T Y + (w^T a - b) a).

        Args:
            cfg (ConstructionConfig): Construction constants (uses eta and the layout)

        Returns:
            BlockParams: Attention-only block with entries bounded by (2 eta) v 1
        """
        lay, D = cfg.layout, cfg.D
        basis_cols, weight_cols = lay.columns(lay.basis), lay.columns(lay.weight)
        block = BlockParams.zeros(lay.d_e, 1)
        for j in range(D):
            block.Q[weight_cols[j], j] = -2.0 * cfg.eta
            block.Q[lay.ones, D + j] = 2.0 * cfg.eta / D
            block.K[basis_cols[j], j] = 1.0
            block.K[lay.response, D + j] = 1.0
            block.V[basis_cols[j], weight_cols[j]] = 1.0
        return block

    # Block adding w_1 into the y column
    def build_transfer_block(self, cfg: ConstructionConfig) -> BlockParams:
        lay = cfg.layout
        w1 = lay.weight.start
        block = BlockParams.zeros(lay.d_e, 2)
        block.W1[0, w1], block.W1[1, w1] = 1.0, -1.0
        block.W2[lay.y, 0], block.W2[lay.y, 1] = 1.0, -1.0
        return block

    # Parameter bound implied by the construction constants
    def formula_bound(self, cfg: ConstructionConfig) -> float:
        pre = max(1.0, cfg.d / cfg.h, cfg.query_kernel_value)
        basis = (3.0 * cfg.d * 120.0 ** 2 * (cfg.p + 2) * (2.0 * cfg.M + 2.0) ** (cfg.p + 1)
                 * cfg.n ** ((cfg.p + 1) / (2.0 * cfg.alpha + cfg.d)))
        return max(pre, basis, 2.0 * cfg.eta, 1.0)

    # Assemble the full transformer and its build report
    def build(self, cfg: ConstructionConfig) -> Tuple[TransformerParams, BuildReport]:
        """
        Concatenate preprocessing, basis, T gradient descent and transfer blocks.

        Args:
            cfg (ConstructionConfig): Construction constants

        Returns:
            Tuple[TransformerParams, BuildReport]: Parameters and the build report

        Raises:
            InfeasibleConstructionError: If the basis blocks cannot meet xi <= 1
        """
        logger.info(f"🔧 Building local polynomial transformer: n={cfg.n}, d={cfg.d}, p={cfg.p}, T={cfg.T}, L0={cfg.L0}")
        pre = self.build_preprocess_blocks(cfg)
        basis = self.build_basis_blocks(cfg)
        gd = self.build_gd_block(cfg)
        transfer = self.build_transfer_block(cfg)
        d_ffn = max([b.d_ffn for b in pre + basis] + [2 * cfg.d + 2, 2])
        pre = [b.padded(d_ffn) for b in pre]
        basis = [b.padded(d_ffn) for b in basis]
        gd, transfer = gd.padded(d_ffn), transfer.padded(d_ffn)
        blocks = pre + basis + [gd] * cfg.T + [transfer]

        actual = max(b.max_abs() for b in pre + basis + [gd, transfer])
        B_formula = self.formula_bound(cfg)
        notes = [f"w_1 occupies 0-indexed column {cfg.layout.weight.start} (1-indexed {cfg.layout.weight.start + 1} = 2d+D+4)"]
        if actual > B_formula:
            notes.append(f"max |param| {actual:.6g} exceeds the formula bound {B_formula:.6g}")
            logger.warning(f"⚠️ {notes[-1]}")
        d_ffn_formula = 6 * (cfg.D + 1) * (14 + cfg.p)
        if d_ffn > d_ffn_formula:
            notes.append(f"d_ffn {d_ffn} exceeds 6(D+1)(14+p) = {d_ffn_formula}")
        B_used = max(B_formula, actual)
        arch = ArchSpec(d_e=cfg.layout.d_e, d_ffn=d_ffn, L=len(blocks), B=B_used, d=cfg.d, M=cfg.M)
        params = TransformerParams(arch, blocks)
        report = BuildReport(xi=cfg.xi, eta=cfg.eta, T=cfg.T, L0=cfg.L0, c_lo=cfg.c_lo, c_hi=cfg.c_hi,
                             preprocess_blocks=len(pre), basis_blocks=len(basis), gd_blocks=cfg.T,
                             total_blocks=len(blocks), d_e=arch.d_e, d_ffn_used=d_ffn, d_ffn_formula=d_ffn_formula,
                             B_used=B_used, B_formula=B_formula, max_abs_param=actual,
                             block_constant=len(blocks) / math.log(math.e * cfg.n), notes=notes)
        logger.info(f"✅ Built {len(blocks)} blocks (d_e={arch.d_e}, d_ffn={d_ffn}, xi={cfg.xi:.3e})")
        return params, report

    # Run the constructed transformer and record intermediate states
    def forward_trace(self, params: TransformerParams, cfg: ConstructionConfig, prompt: Prompt) -> ForwardTrace:
        """
        Record the register after preprocessing, after the basis blocks and the w span after every GD block.

        Args:
            params (TransformerParams): Constructed transformer
            cfg (ConstructionConfig): Configuration it was built from
            prompt (Prompt): Prompt of length cfg.n

        Returns:
            ForwardTrace: Intermediate registers, w iterates (T+1, D) and the readout

        Raises:
            LayoutMismatchError: If params do not follow cfg's layout
        """
        lay = cfg.layout
        lay.check_arch(params.arch)
        if params.arch.L != cfg.total_blocks:
            raise LayoutMismatchError(f"Transformer has {params.arch.L} blocks, configuration implies {cfg.total_blocks}")
        Z = embed(prompt, lay.d_e)
        blocks = params.blocks
        for block in blocks[:PREPROCESS_BLOCKS]:
            Z = block_forward(Z, block)
        Z_pre = Z.copy()
        gd_start = PREPROCESS_BLOCKS + cfg.basis_block_count
        for block in blocks[PREPROCESS_BLOCKS:gd_start]:
            Z = block_forward(Z, block)
        Z_basis = Z.copy()
        iterates = [Z[-1, lay.weight].copy()]
        for block in blocks[gd_start:gd_start + cfg.T]:
            Z = block_forward(Z, block)
            iterates.append(Z[-1, lay.weight].copy())
        Z = block_forward(Z, blocks[-1])
        return ForwardTrace(Z_pre=Z_pre, Z_basis=Z_basis, w_iterates=np.array(iterates),
                            Z_final=Z, output=read(Z, cfg.M, cfg.d))


# Global instance for easy access
locpol_transformer_builder = LocPolTransformerBuilder()


def build_preprocess_blocks(cfg: ConstructionConfig) -> List[BlockParams]:
    """Backward compatibility function."""
    return locpol_transformer_builder.build_preprocess_blocks(cfg)


def build_basis_blocks(cfg: ConstructionConfig) -> List[BlockParams]:
    """Backward compatibility function."""
    return locpol_transformer_builder.build_basis_blocks(cfg)


def build_gd_block(cfg: ConstructionConfig) -> BlockParams:
    """Backward compatibility function."""
    return locpol_transformer_builder.build_gd_block(cfg)


def build_locpol_transformer(cfg: ConstructionConfig) -> TransformerParams:
    """Backward compatibility function."""
    return locpol_transformer_builder.build(cfg)[0]


def locpol_forward_trace(params: TransformerParams, cfg: ConstructionConfig, prompt: Prompt) -> ForwardTrace:
    """Backward compatibility function."""
    return locpol_transformer_builder.forward_trace(params, cfg, prompt)
