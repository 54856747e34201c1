"""
relu_builder.py

Provides explicit ReLU networks for squares, products and monomials with certified
error bounds, plus network composition and residual absorption, using a class-based approach.
"""
from typing import List, Dict, Optional, Any, Tuple, Sequence, Union
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from modules.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

MULTIPROD_INNER_BOX = 1.1

Layer = Tuple[np.ndarray, np.ndarray]


## Feed-forward ReLU network A_{L+1} o ReLU o A_L o ... o ReLU o A_1
@dataclass(eq=False)
class NetSpec:
    """
    Affine layers with ReLU between consecutive layers and none after the last.
    """
    layers: List[Layer]
    cert_error: float = 0.0
    input_box: Optional[List[Tuple[float, float]]] = None
    bound_certificate: Optional[float] = None
    formula_bounds: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatchError("A network needs at least one affine layer")
        layers = []
        for W, b in self.layers:
            W = np.atleast_2d(np.asarray(W, dtype=np.float64))
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if b.size != W.shape[0]:
                raise ShapeMismatchError(f"Bias of length {b.size} does not match weight rows {W.shape[0]}")
            if layers and layers[-1][0].shape[0] != W.shape[1]:
                raise ShapeMismatchError(
                    f"Layer expects input of size {W.shape[1]}, previous layer emits {layers[-1][0].shape[0]}")
            layers.append((W, b))
        self.layers = layers
        if self.cert_error < 0:
            raise ValueError(f"Certified error must be nonnegative, got {self.cert_error}")
        actual = self.param_bound
        if self.bound_certificate is None or self.bound_certificate < actual:
            self.bound_certificate = actual

    @classmethod
    def affine(cls, W: np.ndarray, b: Optional[np.ndarray] = None) -> "NetSpec":
        """Zero-hidden-layer network x -> W x + b."""
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        return cls([(W, np.zeros(W.shape[0]) if b is None else b)])

    @classmethod
    def identity(cls, dim: int) -> "NetSpec":
        return cls.affine(np.eye(dim))

    @property
    def input_dim(self) -> int:
        return int(self.layers[0][0].shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1][0].shape[0])

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def width(self) -> int:
        return max((int(W.shape[0]) for W, _ in self.layers[:-1]), default=0)

    @property
    def param_bound(self) -> float:
        return max(max(float(np.max(np.abs(W))) if W.size else 0.0,
                       float(np.max(np.abs(b))) if b.size else 0.0) for W, b in self.layers)

    # Sup-norm Lipschitz constant: product of the infinity-operator norms
    def lipschitz_inf(self) -> float:
        return float(np.prod([np.max(np.abs(W).sum(axis=1)) if W.size else 0.0 for W, _ in self.layers]))

    # Evaluate the network on a batch of inputs
    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """
        Evaluate the network.

        Args:
            x (np.ndarray): Inputs of shape (..., input_dim)

        Returns:
            np.ndarray: Outputs of shape (..., output_dim)
        """
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.input_dim:
            raise ShapeMismatchError(f"Input has {h.shape[-1]} features, network expects {self.input_dim}")
        for W, b in self.layers[:-1]:
            h = np.maximum(h @ W.T + b, 0.0)
        W, b = self.layers[-1]
        return h @ W.T + b

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)


## Exact rewrite letting a residual FFN compute a plain FFN map
@dataclass(eq=False)
class FfnBlockRewrite:
    W1p: np.ndarray
    W2p: np.ndarray
    b1p: np.ndarray
    b2p: np.ndarray

    @property
    def width(self) -> int:
        return int(self.W1p.shape[0])

    def apply(self, x: np.ndarray) -> np.ndarray:
        """x + W2' ReLU(W1' x + b1') + b2' for row vectors x."""
        return x + np.maximum(x @ self.W1p.T + self.b1p, 0.0) @ self.W2p.T + self.b2p


## One hidden layer x -> W2 ReLU(W1 x + b1) + b2
@dataclass(eq=False)
class AffineStage:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self) -> int:
        return int(self.W1.shape[1])

    @property
    def hidden(self) -> int:
        return int(self.W1.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.W2.shape[0])

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.W1.T + self.b1, 0.0) @ self.W2.T + self.b2


## Affine glue between stages
@dataclass(eq=False)
class AffineMap:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def linear(cls, W: np.ndarray) -> "AffineMap":
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        return cls(W, np.zeros(W.shape[0]))


def _tent_power(t: np.ndarray, j: int) -> np.ndarray:
    # g composed j times, g(t) = 1 - |2t - 1| on [0, 1]
    for _ in range(j):
        t = 1.0 - np.abs(2.0 * t - 1.0)
    return t


def _hinge_weights(values: np.ndarray, spacing: float) -> np.ndarray:
    # f(z) = f(z_0) + sum_k c_k ReLU(z - z_k) on equally spaced nodes
    slopes = np.diff(values) / spacing
    return np.concatenate([slopes[:1], np.diff(slopes)])


# Sawtooth stages approximating s^2 on [-1, 1]
def build_square_stages(levels: int, stages: int) -> List[AffineStage]:
    """
    Build one-hidden-layer stages whose chain maps s in [-1, 1] to an approximation of s^2.

    Stage 1 maps s to (t, acc) with t = g_r(|s|) and acc = |s| - sum_{j<=r} g_j(|s|)/4^j.
    Each later stage refines acc by r more sawtooth levels; the last stage emits acc only.
    The chain error is at most 4^{-(levels*stages + 1)}.

    Args:
        levels (int): Sawtooth levels r added per stage
        stages (int): Number of stages L

    Returns:
        List[AffineStage]: The L stages
    """
    if levels < 1 or stages < 1:
        raise ValueError(f"Square stages need levels >= 1 and stages >= 1, got {levels}, {stages}")
    r = levels
    spacing = 2.0 ** -r

    nodes = -1.0 + spacing * np.arange(2 ** (r + 1) + 1)
    magnitude = np.abs(nodes)
    tent = _tent_power(magnitude, r)
    acc = magnitude - sum(_tent_power(magnitude, j) / 4.0 ** j for j in range(1, r + 1))
    rows = [tent, acc] if stages > 1 else [acc]
    first = AffineStage(W1=np.ones((nodes.size - 1, 1)),
                        b1=-nodes[:-1],
                        W2=np.vstack([_hinge_weights(v, spacing) for v in rows]),
                        b2=np.array([v[0] for v in rows]))
    result = [first]

    unit_nodes = spacing * np.arange(2 ** r + 1)
    tent = _tent_power(unit_nodes, r)
    for stage in range(2, stages + 1):
        offset = (stage - 1) * r
        delta = -sum(_tent_power(unit_nodes, j) / 4.0 ** (offset + j) for j in range(1, r + 1))
        units = 2 ** r
        W1 = np.zeros((units + 2, 2))
        W1[:units, 0] = 1.0
        W1[units, 1] = 1.0
        W1[units + 1, 1] = -1.0
        b1 = np.concatenate([-unit_nodes[:-1], [0.0, 0.0]])
        acc_row = np.concatenate([_hinge_weights(delta, spacing), [1.0, -1.0]])
        if stage < stages:
            tent_row = np.concatenate([_hinge_weights(tent, spacing), [0.0, 0.0]])
            W2, b2 = np.vstack([tent_row, acc_row]), np.array([tent[0], delta[0]])
        else:
            W2, b2 = acc_row[None, :], np.array([delta[0]])
        result.append(AffineStage(W1=W1, b1=b1, W2=W2, b2=b2))
    return result


# Paired-ReLU identity on dim channels
def passthrough_stage(dim: int) -> AffineStage:
    eye = np.eye(dim)
    return AffineStage(W1=np.vstack([eye, -eye]), b1=np.zeros(2 * dim),
                       W2=np.hstack([eye, -eye]), b2=np.zeros(dim))


# Run several stages side by side on concatenated inputs
def stack_stages(parts: Sequence[AffineStage]) -> AffineStage:
    def block_diag(mats):
        rows = sum(m.shape[0] for m in mats)
        cols = sum(m.shape[1] for m in mats)
        out = np.zeros((rows, cols))
        i = j = 0
        for m in mats:
            out[i:i + m.shape[0], j:j + m.shape[1]] = m
            i, j = i + m.shape[0], j + m.shape[1]
        return out
    return AffineStage(W1=block_diag([p.W1 for p in parts]), b1=np.concatenate([p.b1 for p in parts]),
                       W2=block_diag([p.W2 for p in parts]), b2=np.concatenate([p.b2 for p in parts]))


# Fuse a chain of stages and affine glue into network layers
def compose_elements(elements: Sequence[Union[AffineStage, AffineMap]], in_dim: int) -> List[Layer]:
    """
    Fuse a sequence of stages and affine maps into the layer list of a plain ReLU network.

    Args:
        elements (Sequence[Union[AffineStage, AffineMap]]): Chain applied left to right
        in_dim (int): Input dimension of the chain

    Returns:
        List[Layer]: One layer per stage plus the final affine layer
    """
    A, a = np.eye(in_dim), np.zeros(in_dim)
    layers: List[Layer] = []
    for element in elements:
        if isinstance(element, AffineMap):
            A, a = element.W @ A, element.W @ a + element.b
        else:
            layers.append((element.W1 @ A, element.W1 @ a + element.b1))
            A, a = element.W2, element.b2
    layers.append((A, a))
    return layers


# Pad every hidden layer with inactive units up to width
def pad_hidden(layers: List[Layer], width: int) -> List[Layer]:
    padded = [(W.copy(), b.copy()) for W, b in layers]
    for i in range(len(padded) - 1):
        W, b = padded[i]
        extra = width - W.shape[0]
        if extra < 0:
            raise ShapeMismatchError(f"Hidden layer {i} has width {W.shape[0]} above the target {width}")
        padded[i] = (np.vstack([W, np.zeros((extra, W.shape[1]))]), np.concatenate([b, np.zeros(extra)]))
        W_next, b_next = padded[i + 1]
        padded[i + 1] = (np.hstack([W_next, np.zeros((W_next.shape[0], extra))]), b_next)
    return padded


# Levels per stage so that 4^r >= N
def levels_for(N: int) -> int:
    return max(1, int(math.ceil(math.log(N, 4) - 1e-12))) if N > 1 else 1


def _product_elements(levels: int, stages: int, box: float, rest: int) -> List[Union[AffineStage, AffineMap]]:
    # State (u, v, rest...) with |u|, |v| <= box  ->  (approx u*v, rest...)
    squares = build_square_stages(levels, stages)
    glue_in = np.zeros((2 + rest, 2 + rest))
    glue_in[0, :2] = [1.0, 1.0]
    glue_in[1, :2] = [1.0, -1.0]
    glue_in[:2] /= 2.0 * box
    glue_in[2:, 2:] = np.eye(rest)
    elements: List[Union[AffineStage, AffineMap]] = [AffineMap.linear(glue_in)]
    for stage in squares:
        parts = [stage, stage] + ([passthrough_stage(rest)] if rest else [])
        elements.append(stack_stages(parts))
    glue_out = np.zeros((1 + rest, 2 + rest))
    glue_out[0, :2] = [box * box, -box * box]
    glue_out[1:, 2:] = np.eye(rest)
    elements.append(AffineMap.linear(glue_out))
    return elements


def _multiprod_elements(k: int, N: int, stages: int) -> List[Union[AffineStage, AffineMap]]:
    # Unit-box product of k inputs by pairing: phi_{m+1} = phi_2(phi_m, x_{m+1})
    elements: List[Union[AffineStage, AffineMap]] = []
    levels = levels_for(N)
    for m in range(1, k):
        elements.extend(_product_elements(levels, stages, MULTIPROD_INNER_BOX, rest=k - m - 1))
    return elements


## Builder for the constructive ReLU approximations
class ReluNetBuilder:
    """
    Builds product, multi-product and monomial networks with their certified bounds.
    """

    def _flag(self, net: NetSpec, name: str, formula_value: float) -> NetSpec:
        net.formula_bounds[name] = formula_value
        if name == "param_bound" and net.param_bound > formula_value:
            net.notes.append(f"param_bound {net.param_bound:.6g} exceeds formula value {formula_value:.6g}")
            logger.debug(f"⚠️ {net.notes[-1]}")
        return net

    # Product network phi(x, y) ~ x*y on [-C, C]^2
    def build_product_net(self, C: float, N: int, L: int) -> NetSpec:
        """
        Build the product network with width 9N+1 and depth L.

        Args:
            C (float): Input box half width, C >= 1
            N (int): Width parameter, N >= 1
            L (int): Depth, L >= 1

        Returns:
            NetSpec: Network with cert_error = 24 C^2 N^{-L}
        """
        if C < 1 or N < 1 or L < 1:
            raise ValueError(f"Product net needs C >= 1, N >= 1, L >= 1, got C={C}, N={N}, L={L}")
        elements = [AffineMap.linear(np.eye(2) / C)]
        elements += _product_elements(levels_for(N), L, 1.0, rest=0)
        elements.append(AffineMap.linear(np.array([[C * C]])))
        layers = pad_hidden(compose_elements(elements, 2), 9 * N + 1)
        net = NetSpec(layers, cert_error=24.0 * C * C * float(N) ** (-L), input_box=[(-C, C)] * 2,
                      formula_bounds={"width": 9 * N + 1, "depth": L})
        return self._flag(net, "param_bound", 32.0 * C * C * N)

    # Multi-product network phi(x_1..x_k) ~ x_1 * ... * x_k on [-C, C]^k
    def build_multiprod_net(self, C: float, k: int, N: int, L: int) -> NetSpec:
        """
        Build C^k phi(x / C) with phi the unit-box pairing of k inputs.

        Args:
            C (float): Input box half width, C >= 1
            k (int): Number of factors, k >= 2
            N (int): Width parameter
            L (int): Depth parameter; each pairing uses 7kL stages

        Returns:
            NetSpec: Network with width 9(N+1)+2k-1, depth 7kL(k-1) and
            cert_error = 30 C^k (k-1) (N+1)^{-7kL}
        """
        if C < 1 or k < 2 or N < 1 or L < 1:
            raise ValueError(f"Multi-product net needs C >= 1, k >= 2, N, L >= 1, got C={C}, k={k}, N={N}, L={L}")
        stages = 7 * k * L
        elements = [AffineMap.linear(np.eye(k) / C)]
        elements += _multiprod_elements(k, N + 1, stages)
        elements.append(AffineMap.linear(np.array([[C ** k]])))
        width = 9 * (N + 1) + 2 * k - 1
        layers = pad_hidden(compose_elements(elements, k), width)
        net = NetSpec(layers, cert_error=30.0 * C ** k * (k - 1) * float(N + 1) ** (-stages),
                      input_box=[(-C, C)] * k, formula_bounds={"width": width, "depth": stages * (k - 1)})
        return self._flag(net, "param_bound", 3.0 * (k + 1) * C ** k * (40.0 * N + 40.0) ** 2)

    # Monomial network psi(x) ~ x^nu on [-C, C]^d
    def build_monomial_net(self, nu: Sequence[int], C: float, N: int, L: int, k: Optional[int] = None) -> NetSpec:
        """
        Build the monomial network for multi-index nu.

        Args:
            nu (Sequence[int]): Multi-index of length d
            C (float): Input box half width
            N (int): Width parameter
            L (int): Depth parameter
            k (int): Degree cap (defaults to max(|nu|, 1))

        Returns:
            NetSpec: Network of depth 7kL(k-1)+1 and width 9(N+1)+2k-1

        Raises:
            ValueError: If |nu| exceeds the cap
        """
        nu = [int(v) for v in nu]
        if any(v < 0 for v in nu):
            raise ValueError(f"Multi-index must be nonnegative, got {nu}")
        degree = sum(nu)
        k = max(degree, 1) if k is None else int(k)
        if degree > k:
            raise ValueError(f"Monomial degree {degree} exceeds the cap k={k}")
        if C < 1 or N < 1 or L < 1:
            raise ValueError(f"Monomial net needs C >= 1, N >= 1, L >= 1, got C={C}, N={N}, L={L}")
        d = len(nu)
        stages = 7 * k * L
        depth = stages * (k - 1) + 1
        width = 9 * (N + 1) + 2 * k - 1
        factors = [j for j, power in enumerate(nu) for _ in range(power)]

        if degree == 0:
            layers: List[Layer] = [(np.zeros((width, d)), np.zeros(width))]
            layers += [(np.zeros((width, width)), np.zeros(width)) for _ in range(depth - 1)]
            layers.append((np.zeros((1, width)), np.ones(1)))
        else:
            select = np.zeros((degree, d))
            select[np.arange(degree), factors] = 1.0
            elements: List[Union[AffineStage, AffineMap]] = [AffineMap.linear(select), passthrough_stage(degree)]
            if degree >= 2:
                elements.append(AffineMap.linear(np.eye(degree) / C))
                elements += _multiprod_elements(degree, N + 1, stages)
                elements.append(AffineMap.linear(np.array([[C ** degree]])))
            used = 1 + (degree - 1) * stages
            elements += [passthrough_stage(1)] * (depth - used)
            layers = pad_hidden(compose_elements(elements, d), width)

        net = NetSpec(layers, cert_error=30.0 * C ** k * (k - 1) * float(N + 1) ** (-stages),
                      input_box=[(-C, C)] * d, formula_bounds={"width": width, "depth": depth})
        return self._flag(net, "param_bound", 3.0 * (k + 1) * C ** k * (40.0 * N + 40.0) ** 2)

    # Network composition f2 o f1 with the fused boundary layer
    def compose_nets(self, f1: NetSpec, f2: NetSpec, cert_error: Optional[float] = None) -> NetSpec:
        """
        Compose two networks by fusing f1's output layer into f2's input layer.

        Args:
            f1 (NetSpec): Inner network
            f2 (NetSpec): Outer network
            cert_error (float): Explicit certificate; defaults to cert2 + Lip(f2) cert1

        Returns:
            NetSpec: Network realizing f2 o f1 with depth depth1 + depth2

        Raises:
            ShapeMismatchError: If f1's output size differs from f2's input size
        """
        if f1.output_dim != f2.input_dim:
            raise ShapeMismatchError(f"Cannot compose: inner output {f1.output_dim} != outer input {f2.input_dim}")
        W_last, b_last = f1.layers[-1]
        W_first, b_first = f2.layers[0]
        fused = (W_first @ W_last, W_first @ b_last + b_first)
        inner = f1.output_dim
        fused_bound = (inner * float(np.max(np.abs(W_first)))
                       * max(float(np.max(np.abs(W_last))), float(np.max(np.abs(b_last))) if b_last.size else 0.0)
                       + (float(np.max(np.abs(b_first))) if b_first.size else 0.0))
        if cert_error is None:
            cert_error = f2.cert_error + f2.lipschitz_inf() * f1.cert_error
        return NetSpec(layers=f1.layers[:-1] + [fused] + f2.layers[1:],
                       cert_error=cert_error,
                       input_box=f1.input_box,
                       bound_certificate=max(fused_bound, f1.bound_certificate, f2.bound_certificate),
                       notes=f1.notes + f2.notes)

    # Residual absorption with paired-ReLU identity channels
    def absorb_residual(self, W1: np.ndarray, W2: np.ndarray, b1: np.ndarray, b2: np.ndarray, B: float) -> FfnBlockRewrite:
        """
        Rewrite a plain FFN so that adding the residual reproduces it exactly.

        Args:
            W1 (np.ndarray): Hidden weights (m, d')
            W2 (np.ndarray): Output weights (d', m)
            b1 (np.ndarray): Hidden bias (m,)
            b2 (np.ndarray): Output bias (d',)
            B (float): Parameter bound, at least 1

        Returns:
            FfnBlockRewrite: Weights of width m + 2d'

        Raises:
            ValueError: If B < 1 or a parameter exceeds B
        """
        if B < 1:
            raise ValueError(f"Residual absorption needs B >= 1, got {B}")
        W1, W2 = np.atleast_2d(W1).astype(np.float64), np.atleast_2d(W2).astype(np.float64)
        b1, b2 = np.asarray(b1, dtype=np.float64), np.asarray(b2, dtype=np.float64)
        largest = max(float(np.max(np.abs(a))) if a.size else 0.0 for a in (W1, W2, b1, b2))
        if largest > B:
            raise ValueError(f"FFN parameter magnitude {largest:.6g} exceeds B={B}")
        dim = W1.shape[1]
        if W2.shape[0] != dim:
            raise ShapeMismatchError(f"Residual absorption needs a square map, got W1 {W1.shape} and W2 {W2.shape}")
        eye = np.eye(dim)
        return FfnBlockRewrite(W1p=np.vstack([W1, eye, -eye]),
                               W2p=np.hstack([W2, -eye, eye]),
                               b1p=np.concatenate([b1, np.zeros(2 * dim)]),
                               b2p=b2.copy())


# Global instance for easy access
relu_builder = ReluNetBuilder()


def compose_nets(f1: NetSpec, f2: NetSpec, cert_error: Optional[float] = None) -> NetSpec:
    """Backward compatibility function."""
    return relu_builder.compose_nets(f1, f2, cert_error)


def absorb_residual(W1: np.ndarray, W2: np.ndarray, b1: np.ndarray, b2: np.ndarray, B: float) -> FfnBlockRewrite:
    """Backward compatibility function."""
    return relu_builder.absorb_residual(W1, W2, b1, b2, B)


def build_product_net(C: float, N: int, L: int) -> NetSpec:
    """Backward compatibility function."""
    return relu_builder.build_product_net(C, N, L)


def build_multiprod_net(C: float, k: int, N: int, L: int) -> NetSpec:
    """Backward compatibility function."""
    return relu_builder.build_multiprod_net(C, k, N, L)


def build_monomial_net(nu: Sequence[int], C: float, N: int, L: int, k: Optional[int] = None) -> NetSpec:
    """Backward compatibility function."""
    return relu_builder.build_monomial_net(nu, C, N, L, k)
