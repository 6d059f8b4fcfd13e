# laaf/services/network.py
"""Dense feed-forward networks with fixed, global (GAAF), layer-wise (L-LAAF)
and neuron-wise (N-LAAF) adaptive activations.

Hidden layer k computes sigma(n * a * (w^k z^{k-1} + b^k)) where the slope `a`
is shared by the whole network (GAAF), by layer k (L-LAAF) or belongs to one
neuron (N-LAAF). The output layer is affine and carries no slope.

Flat ordering of trainable parameters, used by every consumer:
  for k = 1..D: w^k row-major, then b^k      (omega + beta entries)
  then all slopes: GAAF [a], L-LAAF [a^1..a^{D-1}], N-LAAF [a^1_1..a^1_{N_1}, a^2_1, ...]
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from ..errors import ModeError, ShapeError
from .autodiff import Tape, Var
from .seeding import stream

logger = logging.getLogger(__name__)


class SlopeMode(str, Enum):
    FIXED = "fixed"
    GAAF = "gaaf"
    LLAAF = "llaaf"
    NLAAF = "nlaaf"


class Nonlinearity(str, Enum):
    TANH = "tanh"
    SIGMOID = "sigmoid"
    RELU = "relu"
    SOFTPLUS = "softplus"
    SIN = "sin"


@dataclass(frozen=True)
class ActivationMode:
    kind: SlopeMode = SlopeMode.FIXED
    base: Nonlinearity = Nonlinearity.TANH
    n: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SlopeMode(self.kind))
        object.__setattr__(self, "base", Nonlinearity(self.base))
        object.__setattr__(self, "n", float(self.n))
        if not (np.isfinite(self.n) and self.n >= 1.0):
            raise ModeError(f"scaling factor n must be >= 1, got {self.n}")

    @property
    def has_slopes(self) -> bool:
        return self.kind is not SlopeMode.FIXED


class ParamKey(NamedTuple):
    layer: int
    role: str  # "w", "b" or "a"
    position: tuple[int, ...]


def _check_widths(widths: Sequence[int]) -> tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ShapeError(f"need at least input and output widths, got {list(widths)}")
    if any(w < 1 for w in widths):
        raise ShapeError(f"every width must be >= 1, got {list(widths)}")
    return widths


def count_parameters(widths: Sequence[int]) -> tuple[int, int]:
    """(omega, beta): total weights and total biases."""
    widths = _check_widths(widths)
    omega = sum(widths[k - 1] * widths[k] for k in range(1, len(widths)))
    beta = sum(widths[1:])
    return omega, beta


def hidden_parameter_count(widths: Sequence[int]) -> int:
    widths = _check_widths(widths)
    return sum(widths[k] * (widths[k - 1] + 1) for k in range(1, len(widths) - 1))


def slope_count(widths: Sequence[int], kind: SlopeMode) -> int:
    widths = _check_widths(widths)
    kind = SlopeMode(kind)
    if kind is SlopeMode.FIXED:
        return 0
    if kind is SlopeMode.GAAF:
        return 1
    if kind is SlopeMode.LLAAF:
        return len(widths) - 2
    return sum(widths[1:-1])


def slope_index(widths: Sequence[int], kind: SlopeMode, layer: int, neuron: int) -> int:
    """Position in the slope vector governing neuron `neuron` of hidden layer `layer` (1-based)."""
    kind = SlopeMode(kind)
    if kind is SlopeMode.FIXED:
        raise ModeError("fixed activations have no slopes")
    if kind is SlopeMode.GAAF:
        return 0
    if kind is SlopeMode.LLAAF:
        return layer - 1
    return sum(widths[1:layer]) + neuron


def param_count_ratio(widths: Sequence[int]) -> float:
    """Size of the N-LAAF parameter space over the fixed one, P ~ (1 + 2 rho) / (1 + rho), rho = beta / omega."""
    widths = _check_widths(widths)
    if len(widths) < 3:
        raise ShapeError("the ratio needs at least one hidden layer")
    omega, beta = count_parameters(widths)
    rho = beta / omega
    return (1.0 + 2.0 * rho) / (1.0 + rho)


@lru_cache(maxsize=64)
def param_keys(widths: tuple[int, ...], kind: SlopeMode) -> tuple[ParamKey, ...]:
    keys: list[ParamKey] = []
    for k in range(1, len(widths)):
        for j in range(widths[k]):
            for i in range(widths[k - 1]):
                keys.append(ParamKey(k, "w", (j, i)))
        for j in range(widths[k]):
            keys.append(ParamKey(k, "b", (j,)))
    kind = SlopeMode(kind)
    if kind is SlopeMode.GAAF:
        keys.append(ParamKey(0, "a", ()))
    elif kind is SlopeMode.LLAAF:
        keys.extend(ParamKey(k, "a", ()) for k in range(1, len(widths) - 1))
    elif kind is SlopeMode.NLAAF:
        for k in range(1, len(widths) - 1):
            keys.extend(ParamKey(k, "a", (j,)) for j in range(widths[k]))
    return tuple(keys)


@dataclass
class NetworkParams:
    widths: tuple[int, ...]
    mode: ActivationMode
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slopes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int | None = None

    def __post_init__(self):
        self.widths = _check_widths(self.widths)
        depth = len(self.widths) - 1
        if len(self.weights) != depth or len(self.biases) != depth:
            raise ShapeError(f"expected {depth} weight/bias layers")
        for k in range(1, depth + 1):
            shape = (self.widths[k], self.widths[k - 1])
            self.weights[k - 1] = np.asarray(self.weights[k - 1], dtype=np.float64).reshape(shape)
            self.biases[k - 1] = np.asarray(self.biases[k - 1], dtype=np.float64).reshape(self.widths[k])
        self.slopes = np.asarray(self.slopes, dtype=np.float64).ravel()
        expected = slope_count(self.widths, self.mode.kind)
        if self.slopes.size != expected:
            raise ShapeError(f"{self.mode.kind.value} on {list(self.widths)} needs {expected} slopes, got {self.slopes.size}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def slope_for(self, layer: int, neuron: int) -> float:
        return float(self.slopes[slope_index(self.widths, self.mode.kind, layer, neuron)])

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            widths=self.widths,
            mode=self.mode,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            slopes=self.slopes.copy(),
            seed=self.seed,
        )


def init(widths: Sequence[int], mode: ActivationMode, seed: int) -> NetworkParams:
    """Xavier-uniform weights, zero biases, every slope 1/n."""
    widths = _check_widths(widths)
    rng = stream(seed, "init")
    weights, biases = [], []
    for k in range(1, len(widths)):
        limit = np.sqrt(6.0 / (widths[k - 1] + widths[k]))
        weights.append(rng.uniform(-limit, limit, size=(widths[k], widths[k - 1])))
        biases.append(np.zeros(widths[k]))
    slopes = np.full(slope_count(widths, mode.kind), 1.0 / mode.n)
    logger.debug("initialized %s network %s (seed %d)", mode.kind.value, list(widths), seed)
    return NetworkParams(widths, mode, weights, biases, slopes, seed)


@dataclass
class FlatParams:
    values: np.ndarray
    widths: tuple[int, ...]
    mode: ActivationMode

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.widths = _check_widths(self.widths)
        if self.values.size != len(self.keys):
            raise ShapeError(f"flat vector has {self.values.size} entries, layout needs {len(self.keys)}")

    @property
    def keys(self) -> tuple[ParamKey, ...]:
        return param_keys(self.widths, self.mode.kind)

    def offset(self, key: ParamKey) -> int:
        return _key_offsets(self.widths, self.mode.kind)[key]

    @property
    def slope_offset(self) -> int:
        omega, beta = count_parameters(self.widths)
        return omega + beta


@lru_cache(maxsize=64)
def _key_offsets(widths: tuple[int, ...], kind: SlopeMode) -> dict[ParamKey, int]:
    return {key: i for i, key in enumerate(param_keys(widths, kind))}


def flatten(params: NetworkParams) -> FlatParams:
    pieces = []
    for w, b in zip(params.weights, params.biases):
        pieces.append(w.ravel())
        pieces.append(b)
    pieces.append(params.slopes)
    return FlatParams(np.concatenate(pieces), params.widths, params.mode)


def unflatten(flat: FlatParams, seed: int | None = None) -> NetworkParams:
    widths = flat.widths
    if flat.values.size != len(flat.keys):
        raise ShapeError("flat vector length does not match its layout")
    weights, biases = [], []
    cursor = 0
    for k in range(1, len(widths)):
        size = widths[k] * widths[k - 1]
        weights.append(flat.values[cursor:cursor + size].reshape(widths[k], widths[k - 1]).copy())
        cursor += size
        biases.append(flat.values[cursor:cursor + widths[k]].copy())
        cursor += widths[k]
    return NetworkParams(widths, flat.mode, weights, biases, flat.values[cursor:].copy(), seed)


def with_values(params: NetworkParams, values: np.ndarray) -> NetworkParams:
    """Same architecture and mode, parameters taken from a flat vector."""
    return unflatten(FlatParams(values, params.widths, params.mode), params.seed)


def _row_scales(params: NetworkParams, layer: int) -> np.ndarray:
    """n * slope for every neuron of hidden layer `layer`."""
    kind, n = params.mode.kind, params.mode.n
    width = params.widths[layer]
    if kind is SlopeMode.GAAF:
        return np.full(width, n * params.slopes[0])
    if kind is SlopeMode.LLAAF:
        return np.full(width, n * params.slopes[layer - 1])
    start = sum(params.widths[1:layer])
    return n * params.slopes[start:start + width]


def effective_theta(params: NetworkParams) -> np.ndarray:
    """Effective parameters A a o W of the equivalent standard network.

    Hidden weights and biases are scaled by n * slope of the governing slope;
    output-layer parameters follow unscaled, in flat order.
    """
    if not params.mode.has_slopes:
        raise ModeError("effective_theta needs an adaptive mode")
    pieces = []
    for k in range(1, params.depth + 1):
        w, b = params.weights[k - 1], params.biases[k - 1]
        if k < params.depth:
            scale = _row_scales(params, k)
            w, b = w * scale[:, None], b * scale
        pieces.append(w.ravel())
        pieces.append(b)
    return np.concatenate(pieces)


def to_standard(params: NetworkParams) -> NetworkParams:
    """Fixed-activation network computing the same function from effective_theta."""
    theta = effective_theta(params)
    mode = ActivationMode(SlopeMode.FIXED, params.mode.base, 1.0)
    return unflatten(FlatParams(theta, params.widths, mode), params.seed)


@dataclass
class BoundNetwork:
    """Network parameters lifted onto a tape as leaves, in flat order."""

    leaves: list[Var]
    weights: list[list[list[Var]]]
    biases: list[list[Var]]
    slopes: list[Var]


def bind(params: NetworkParams, tape: Tape, values: np.ndarray | None = None) -> BoundNetwork:
    if values is None:
        values = flatten(params).values
    return bind_leaves(params, tape.lift_many(values))


def bind_leaves(params: NetworkParams, leaves: Sequence[Var]) -> BoundNetwork:
    """Arrange already-lifted Vars, in flat order, as the network's parameters."""
    widths = params.widths
    leaves = list(leaves)
    if len(leaves) != len(param_keys(widths, params.mode.kind)):
        raise ShapeError("value vector does not match the network layout")
    weights, biases = [], []
    cursor = 0
    for k in range(1, len(widths)):
        rows = []
        for _ in range(widths[k]):
            rows.append(leaves[cursor:cursor + widths[k - 1]])
            cursor += widths[k - 1]
        weights.append(rows)
        biases.append(leaves[cursor:cursor + widths[k]])
        cursor += widths[k]
    return BoundNetwork(leaves, weights, biases, leaves[cursor:])


def activate(base: Nonlinearity, x: Var) -> Var:
    if base is Nonlinearity.TANH:
        return x.tanh()
    if base is Nonlinearity.SIGMOID:
        return x.sigmoid()
    if base is Nonlinearity.RELU:
        return x.relu()
    if base is Nonlinearity.SOFTPLUS:
        return x.softplus()
    return x.sin()


def forward(params: NetworkParams, inputs: Sequence[Var], tape: Tape, bound: BoundNetwork | None = None) -> list[Var]:
    """Network output for input Vars (scalar or lane valued), recorded on `tape`."""
    widths, mode = params.widths, params.mode
    if len(inputs) != widths[0]:
        raise ShapeError(f"network expects {widths[0]} inputs, got {len(inputs)}")
    if bound is None:
        bound = bind(params, tape)

    scaled: list[Var] = []
    if mode.has_slopes:
        scaled = bound.slopes if mode.n == 1.0 else [mode.n * a for a in bound.slopes]

    z = list(inputs)
    depth = len(widths) - 1
    for k in range(1, depth + 1):
        layer_out = []
        for j in range(widths[k]):
            pre = tape.affine(bound.biases[k - 1][j], bound.weights[k - 1][j], z)
            if k < depth:
                if mode.has_slopes:
                    pre = scaled[slope_index(widths, mode.kind, k, j)] * pre
                pre = activate(mode.base, pre)
            layer_out.append(pre)
        z = layer_out
    return z


def evaluate(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Numeric forward pass on an (N, N_0) array; returns (N, N_D)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.widths[0]:
        raise ShapeError(f"inputs have {x.shape[1]} columns, network expects {params.widths[0]}")
    tape = Tape()
    outputs = forward(params, [tape.lift(x[:, i]) for i in range(x.shape[1])], tape)
    return np.column_stack([np.broadcast_to(out.value, (x.shape[0],)) for out in outputs])
