"""
transformer.py

Provides the linear-attention transformer forward pass, prompt embedding and readout,
the parameter container for T(d_e, d_ffn, L, B) and its Lipschitz and covering bounds.
"""
from typing import List, Dict, Optional, Any, Union
from dataclasses import dataclass
import logging
import math

import numpy as np

from modules.datagen import Prompt
from modules.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

BLOCK_FIELDS = ("Q", "K", "V", "W1", "W2", "b1", "b2")


## Architecture of the class T(d_e, d_ffn, L, B)
@dataclass(frozen=True)
class ArchSpec:
    d_e: int
    d_ffn: int
    L: int
    B: float
    d: int
    M: float

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"Covariate dimension must be positive, got {self.d}")
        if self.d_e < self.d + 2:
            raise ValueError(f"Embedding dimension must be at least d + 2 = {self.d + 2}, got {self.d_e}")
        if self.d_ffn < 1 or self.L < 1:
            raise ValueError(f"d_ffn and L must be positive, got d_ffn={self.d_ffn}, L={self.L}")
        if not self.B > 0 or not self.M > 0:
            raise ValueError(f"B and M must be positive, got B={self.B}, M={self.M}")

    # Shapes of the seven tensors of one block
    def block_shapes(self) -> Dict[str, tuple]:
        e, f = self.d_e, self.d_ffn
        return {"Q": (e, e), "K": (e, e), "V": (e, e), "W1": (f, e), "W2": (e, f), "b1": (f,), "b2": (e,)}

    @property
    def params_per_block(self) -> int:
        return int(sum(np.prod(shape) for shape in self.block_shapes().values()))

    @property
    def n_params(self) -> int:
        return self.L * self.params_per_block

    def with_bound(self, B: float) -> "ArchSpec":
        return ArchSpec(self.d_e, self.d_ffn, self.L, B, self.d, self.M)

    @property
    def dims(self) -> "ClassDims":
        return ClassDims(d_e=self.d_e, d_ffn=self.d_ffn, L=self.L, B=self.B)

    def to_dict(self) -> Dict[str, Any]:
        return {"d_e": self.d_e, "d_ffn": self.d_ffn, "L": self.L, "B": self.B, "d": self.d, "M": self.M}


## Sizes entering the capacity bounds; admits the degenerate B = 0 class
@dataclass(frozen=True)
class ClassDims:
    d_e: int
    d_ffn: int
    L: int
    B: float

    def __post_init__(self):
        if self.d_e < 1 or self.d_ffn < 1 or self.L < 1 or self.B < 0:
            raise ValueError(f"Invalid class dimensions d_e={self.d_e}, d_ffn={self.d_ffn}, L={self.L}, B={self.B}")


## One transformer block theta = (Q, K, V, W1, W2, b1, b2)
@dataclass(eq=False)
class BlockParams:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in BLOCK_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @classmethod
    def zeros(cls, d_e: int, d_ffn: int) -> "BlockParams":
        return cls(np.zeros((d_e, d_e)), np.zeros((d_e, d_e)), np.zeros((d_e, d_e)),
                   np.zeros((d_ffn, d_e)), np.zeros((d_e, d_ffn)), np.zeros(d_ffn), np.zeros(d_e))

    @property
    def d_e(self) -> int:
        return int(self.Q.shape[0])

    @property
    def d_ffn(self) -> int:
        return int(self.W1.shape[0])

    def arrays(self) -> List[np.ndarray]:
        return [getattr(self, name) for name in BLOCK_FIELDS]

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) if a.size else 0.0 for a in self.arrays())

    def copy(self) -> "BlockParams":
        return BlockParams(*[a.copy() for a in self.arrays()])

    # Check every tensor against the architecture
    def validate(self, arch: ArchSpec) -> None:
        for name, shape in arch.block_shapes().items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatchError(f"Block tensor {name} has shape {getattr(self, name).shape}, expected {shape}")

    # Pad the FFN to a wider hidden layer with inactive units
    def padded(self, d_ffn: int) -> "BlockParams":
        extra = d_ffn - self.d_ffn
        if extra < 0:
            raise ShapeMismatchError(f"Cannot pad FFN of width {self.d_ffn} down to {d_ffn}")
        return BlockParams(self.Q, self.K, self.V,
                           np.vstack([self.W1, np.zeros((extra, self.d_e))]),
                           np.hstack([self.W2, np.zeros((self.d_e, extra))]),
                           np.concatenate([self.b1, np.zeros(extra)]),
                           self.b2)


## Full parameter vector theta of a transformer in the class
class TransformerParams:
    """
    Holds L blocks and keeps every entry inside [-B, B].
    """

    def __init__(self, arch: ArchSpec, blocks: List[BlockParams]):
        """
        Initialize the TransformerParams, projecting entries onto [-B, B].

        Args:
            arch (ArchSpec): Architecture the blocks belong to
            blocks (List[BlockParams]): Exactly arch.L blocks

        Raises:
            ShapeMismatchError: If the block count or a tensor shape is wrong
        """
        if len(blocks) != arch.L:
            raise ShapeMismatchError(f"Expected {arch.L} blocks, got {len(blocks)}")
        for block in blocks:
            block.validate(arch)
        self.arch = arch
        self.blocks = blocks
        clipped = self.project()
        if clipped:
            logger.debug(f"⚠️ Projected {clipped} parameter entries onto [-{arch.B}, {arch.B}]")

    @classmethod
    def zeros(cls, arch: ArchSpec) -> "TransformerParams":
        return cls(arch, [BlockParams.zeros(arch.d_e, arch.d_ffn) for _ in range(arch.L)])

    @classmethod
    def random(cls, arch: ArchSpec, rng: np.random.Generator, scale: Optional[float] = None) -> "TransformerParams":
        """Uniform entries on [-scale, scale] (scale defaults to B)."""
        scale = arch.B if scale is None else min(scale, arch.B)
        return cls.from_vector(arch, rng.uniform(-scale, scale, arch.n_params))

    # Entrywise clamp onto [-B, B]; returns how many entries moved
    def project(self) -> int:
        moved = 0
        for block in self.blocks:
            for name in BLOCK_FIELDS:
                array = getattr(block, name)
                outside = np.abs(array) > self.arch.B
                if np.any(outside):
                    moved += int(outside.sum())
                    setattr(block, name, np.clip(array, -self.arch.B, self.arch.B))
        return moved

    def max_abs_param(self) -> float:
        return max(block.max_abs() for block in self.blocks)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for block in self.blocks for a in block.arrays()])

    @classmethod
    def from_vector(cls, arch: ArchSpec, vector: np.ndarray) -> "TransformerParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != arch.n_params:
            raise ShapeMismatchError(f"Parameter vector has {vector.size} entries, expected {arch.n_params}")
        blocks, offset = [], 0
        for _ in range(arch.L):
            arrays = {}
            for name, shape in arch.block_shapes().items():
                size = int(np.prod(shape))
                arrays[name] = vector[offset:offset + size].reshape(shape).copy()
                offset += size
            blocks.append(BlockParams(**arrays))
        return cls(arch, blocks)

    def copy(self) -> "TransformerParams":
        return TransformerParams(self.arch, [block.copy() for block in self.blocks])


def _check_square(Z: np.ndarray, *matrices: np.ndarray) -> None:
    d_e = Z.shape[-1]
    for matrix in matrices:
        if matrix.shape != (d_e, d_e):
            raise ShapeMismatchError(f"Attention matrix has shape {matrix.shape}, expected {(d_e, d_e)}")


# Residual increment of linear attention
def attention_update(Z: np.ndarray, Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """
    Compute Z Q (Z K)^T Z V without the residual.

    Args:
        Z (np.ndarray): Sequence of shape (..., n+1, d_e)
        Q (np.ndarray): Query matrix (d_e, d_e)
        K (np.ndarray): Key matrix (d_e, d_e)
        V (np.ndarray): Value matrix (d_e, d_e)

    Returns:
        np.ndarray: Update of the same shape as Z
    """
    _check_square(Z, Q, K, V)
    return (Z @ Q) @ (np.swapaxes(Z @ K, -1, -2) @ (Z @ V))


def attention_forward(Z: np.ndarray, Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Attn_{Q,K,V}(Z) = Z + Z Q (Z K)^T Z V with no normalization or masking."""
    return Z + attention_update(Z, Q, K, V)


# Residual increment of the row-wise FFN
def ffn_update(Z: np.ndarray, W1: np.ndarray, W2: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    d_e = Z.shape[-1]
    if W1.shape[1] != d_e or W2.shape[0] != d_e or W1.shape[0] != W2.shape[1] or b1.shape != (W1.shape[0],) or b2.shape != (d_e,):
        raise ShapeMismatchError(
            f"FFN shapes W1={W1.shape}, W2={W2.shape}, b1={b1.shape}, b2={b2.shape} do not conform to d_e={d_e}")
    return np.maximum(Z @ W1.T + b1, 0.0) @ W2.T + b2


def ffn_forward(Z: np.ndarray, W1: np.ndarray, W2: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    return Z + ffn_update(Z, W1, W2, b1, b2)


def block_forward(Z: np.ndarray, block: BlockParams) -> np.ndarray:
    """One block: attention then FFN, each with its residual."""
    Z = attention_forward(Z, block.Q, block.K, block.V)
    return ffn_forward(Z, block.W1, block.W2, block.b1, block.b2)


# Run every block in order
def tf_forward(params: TransformerParams, Z: np.ndarray) -> np.ndarray:
    """
    Apply TF_theta = Block_L o ... o Block_1.

    Args:
        params (TransformerParams): Blocks to apply
        Z (np.ndarray): Sequence of shape (..., n+1, d_e)

    Returns:
        np.ndarray: Output sequence of the same shape
    """
    if Z.shape[-1] != params.arch.d_e:
        raise ShapeMismatchError(f"Sequence width {Z.shape[-1]} does not match d_e={params.arch.d_e}")
    for block in params.blocks:
        Z = block_forward(Z, block)
    return Z


# Place a prompt into the (n+1) x d_e input matrix
def embed(prompt: Prompt, d_e: int) -> np.ndarray:
    """
    Embed a prompt: data rows (x_i, y_i, 0, ...) and query row (x_{n+1}, 0, ..., 0, 1).

    Args:
        prompt (Prompt): In-context examples and query
        d_e (int): Embedding dimension

    Returns:
        np.ndarray: Matrix of shape (n+1, d_e)

    Raises:
        ShapeMismatchError: If d_e < d + 2
    """
    n, d = prompt.n, prompt.d
    if d_e < d + 2:
        raise ShapeMismatchError(f"Embedding dimension {d_e} is smaller than d + 2 = {d + 2}")
    Z = np.zeros((n + 1, d_e))
    Z[:n, :d] = prompt.xs
    Z[:n, d] = prompt.ys
    Z[n, :d] = prompt.query
    Z[n, -1] = 1.0
    return Z


# Clamped prediction from the query row
def read(Z: np.ndarray, M: float, d: int) -> float:
    if Z.shape[-1] < d + 1:
        raise ShapeMismatchError(f"Sequence has {Z.shape[-1]} columns, readout needs {d + 1}")
    return float(np.clip(Z[-1, d], -M, M))


## Predictor read o TF_theta o embed
class TransformerPredictor:
    def __init__(self, params: TransformerParams):
        self.params = params

    def __call__(self, prompt: Prompt) -> float:
        arch = self.params.arch
        return read(tf_forward(self.params, embed(prompt, arch.d_e)), arch.M, arch.d)

    # Batched predictions for prompts of one length
    def predict_batch(self, prompts: List[Prompt], chunk: int = 256) -> np.ndarray:
        arch = self.params.arch
        out = []
        for start in range(0, len(prompts), chunk):
            Z = np.stack([embed(p, arch.d_e) for p in prompts[start:start + chunk]])
            out.append(np.clip(tf_forward(self.params, Z)[:, -1, arch.d], -arch.M, arch.M))
        return np.concatenate(out) if out else np.zeros(0)


## Closed-form capacity bounds, all evaluated in log space
class BoundCalculator:
    """
    Lipschitz constant of theta -> TF_theta and log-covering number of the predictor class.
    """

    # Log of 6^L (B+1)^{3L} (R+1)^{4L} (n+1)^{5L/2} d_e^{6L} d_ffn^{3L/2} delta
    def lipschitz_bound(self, arch: Union[ArchSpec, ClassDims], R: float, delta: float, n: int) -> float:
        """
        Log of the parameter-perturbation bound.

        Args:
            arch (Union[ArchSpec, ClassDims]): Class sizes L, B, d_e, d_ffn
            R (float): Bound on ||Z||_max
            delta (float): Entrywise parameter perturbation
            n (int): Prompt length

        Returns:
            float: Log-bound, or -inf when delta is 0
        """
        if delta < 0 or R < 0 or n < 0 or arch.B < 0:
            raise ValueError(f"Lipschitz bound needs nonnegative R, delta and n, got R={R}, delta={delta}, n={n}")
        if delta == 0:
            return float("-inf")
        L = arch.L
        return (L * math.log(6.0) + 3 * L * math.log1p(arch.B) + 4 * L * math.log1p(R)
                + 2.5 * L * math.log1p(n) + 6 * L * math.log(arch.d_e) + 1.5 * L * math.log(arch.d_ffn)
                + math.log(delta))

    # 24 L d_e (d_e + d_ffn) log((B+1)^L (M+2)^{2L} (n+1)^L d_e^L d_ffn^L / delta)
    def covering_log_bound(self, arch: Union[ArchSpec, ClassDims], M: float, n: int, delta: float) -> float:
        """
        Log-covering number of the truncated predictor class at scale delta.

        Args:
            arch (Union[ArchSpec, ClassDims]): Class sizes L, B, d_e, d_ffn
            M (float): Readout clamp
            n (int): Prompt length
            delta (float): Covering radius, 0 < delta <= M

        Returns:
            float: Log-covering bound

        Raises:
            ValueError: If delta is outside (0, M]
        """
        if not 0 < delta <= M:
            raise ValueError(f"Covering radius must lie in (0, M={M}], got {delta}")
        L = arch.L
        log_argument = (L * math.log1p(arch.B) + 2 * L * math.log(M + 2.0) + L * math.log1p(n)
                        + L * math.log(arch.d_e) + L * math.log(arch.d_ffn) - math.log(delta))
        return 24.0 * L * arch.d_e * (arch.d_e + arch.d_ffn) * log_argument

    # Statistical term of the ERM expectation bound with unit constant
    def expectation_tail(self, arch: Union[ArchSpec, ClassDims], M: float, n: int, gamma: int) -> float:
        """(M+1)^5 L d_e (d_e + d_ffn) (L log{(B+1) n d_e d_ffn} + log Gamma) / Gamma."""
        if gamma < 1 or n < 1:
            raise ValueError(f"Tail term needs n >= 1 and Gamma >= 1, got n={n}, gamma={gamma}")
        inner = arch.L * math.log((arch.B + 1.0) * n * arch.d_e * arch.d_ffn) + math.log(gamma)
        return (M + 1.0) ** 5 * arch.L * arch.d_e * (arch.d_e + arch.d_ffn) * inner / gamma


# Global instance for easy access
bound_calculator = BoundCalculator()


def lipschitz_bound(arch: Union[ArchSpec, ClassDims], R: float, delta: float, n: int) -> float:
    """Backward compatibility function."""
    return bound_calculator.lipschitz_bound(arch, R, delta, n)


def covering_log_bound(arch: Union[ArchSpec, ClassDims], M: float, n: int, delta: float) -> float:
    """Backward compatibility function."""
    return bound_calculator.covering_log_bound(arch, M, n, delta)
