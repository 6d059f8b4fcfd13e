# laaf/services/objective.py
"""Composite training loss.

    J = W_F * MSE_F + W_u * MSE_u + W_a * S(a)

MSE_u is the data mismatch (or cross entropy for classification), MSE_F the mean
squared PDE residual at collocation points and S the slope recovery term.

`Objective` wraps an ObjectiveSpec over one flat vector theta, laid out as the
network's FlatParams followed by the inverse-problem parameters (alpha, nu, ...),
which is the vector the optimizers move.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from ..errors import DomainError, ModeError, ShapeError
from .autodiff import Tape, Var, total
from .network import BoundNetwork, NetworkParams, bind, flatten, forward, with_values
from .problems import InverseParameter, ResidualContext, ResidualOperator

logger = logging.getLogger(__name__)

# residual points evaluated per tape
RESIDUAL_CHUNK = 2048


class RecoveryKind(str, Enum):
    NONE = "none"
    GAAF = "gaaf"
    LLAAF = "llaaf"
    NLAAF = "nlaaf"


class DataLoss(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


def _points(values, name: str) -> np.ndarray | None:
    if values is None:
        return None
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D point array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise DomainError(f"{name} contains non-finite values")
    return array


@dataclass
class ObjectiveSpec:
    w_f: float = 0.0
    w_u: float = 1.0
    w_a: float = 0.0
    data_x: np.ndarray | None = None
    data_u: np.ndarray | None = None
    residual_x: np.ndarray | None = None
    residual: ResidualOperator | None = None
    recovery: RecoveryKind = RecoveryKind.NONE
    data_loss: DataLoss = DataLoss.MSE

    def __post_init__(self):
        self.recovery = RecoveryKind(self.recovery)
        self.data_loss = DataLoss(self.data_loss)
        for name in ("w_f", "w_u", "w_a"):
            weight = float(getattr(self, name))
            if not (np.isfinite(weight) and weight >= 0.0):
                raise DomainError(f"loss weight {name} must be a nonnegative finite number, got {weight}")
            setattr(self, name, weight)

        self.data_x = _points(self.data_x, "data_x")
        self.residual_x = _points(self.residual_x, "residual_x")
        if self.data_u is not None:
            if self.data_loss is DataLoss.CROSS_ENTROPY:
                self.data_u = np.asarray(self.data_u).astype(np.int64).ravel()
            else:
                self.data_u = _points(self.data_u, "data_u")
        if (self.data_x is None) != (self.data_u is None):
            raise ShapeError("data_x and data_u must be given together")
        if self.data_x is not None and len(self.data_x) != len(self.data_u):
            raise ShapeError(f"{len(self.data_x)} data inputs but {len(self.data_u)} targets")

        if self.w_u > 0 and self.n_u == 0:
            raise ShapeError("W_u > 0 needs at least one data point")
        if self.w_f > 0:
            if self.n_f == 0:
                raise ShapeError("W_F > 0 needs at least one residual point")
            if self.residual is None:
                raise ShapeError("W_F > 0 needs a residual operator")

    @property
    def n_u(self) -> int:
        return 0 if self.data_x is None else len(self.data_x)

    @property
    def n_f(self) -> int:
        return 0 if self.residual_x is None else len(self.residual_x)

    def check_mode(self, params: NetworkParams) -> None:
        if self.recovery is not RecoveryKind.NONE and self.recovery.value != params.mode.kind.value:
            raise ModeError(f"recovery kind {self.recovery.value} does not match mode {params.mode.kind.value}")

    def with_data_rows(self, rows: np.ndarray) -> "ObjectiveSpec":
        """Same objective restricted to a subset of the data points (a mini-batch)."""
        return replace(self, data_x=self.data_x[rows], data_u=self.data_u[rows])

    def without_recovery(self) -> "ObjectiveSpec":
        return replace(self, w_a=0.0, recovery=RecoveryKind.NONE)


@dataclass
class LossTerms:
    total: Var
    mse_u: Var | None = None
    mse_f: Var | None = None
    recovery: Var | None = None

    def values(self) -> dict[str, float]:
        def read(var):
            return 0.0 if var is None else float(var.value)

        return {
            "total": read(self.total),
            "mse_u": read(self.mse_u),
            "mse_f": read(self.mse_f),
            "recovery": read(self.recovery),
        }


def _input_lanes(tape: Tape, points: np.ndarray) -> list[Var]:
    return [tape.lift(points[:, i].copy()) for i in range(points.shape[1])]


def mse_data(
    params: NetworkParams,
    x: np.ndarray,
    targets: np.ndarray,
    tape: Tape | None = None,
    bound: BoundNetwork | None = None,
) -> Var:
    """(1/N_u) sum_i |u^i - u(x^i)|^2, summed over output components."""
    x, targets = _points(x, "x"), _points(targets, "targets")
    if x is None or len(x) == 0:
        raise ShapeError("mse_data needs at least one data point")
    if targets.shape != (len(x), params.widths[-1]):
        raise ShapeError(f"targets have shape {targets.shape}, expected {(len(x), params.widths[-1])}")
    tape = Tape() if tape is None else tape
    outputs = forward(params, _input_lanes(tape, x), tape, bound)
    errors = [(out - tape.lift(targets[:, m].copy())).abs_sq().mean() for m, out in enumerate(outputs)]
    return total(errors)


def cross_entropy(logits: Sequence[Var], label) -> Var:
    """-log softmax(logits)[label], stabilized by subtracting the max logit.

    `label` is a class index, or an integer array with one label per lane;
    lane results are averaged.
    """
    if len(logits) < 2:
        raise ShapeError("cross entropy needs at least two classes")
    tape = logits[0].tape
    labels = np.asarray(label)
    if not np.issubdtype(labels.dtype, np.integer):
        raise DomainError(f"labels must be integers, got {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= len(logits)):
        raise DomainError(f"label out of range for {len(logits)} classes")

    # The shift cancels in the loss, so it is lifted as a constant.
    shift = tape.lift(np.maximum.reduce([np.asarray(z.value, dtype=np.float64) for z in logits]))
    shifted = [z - shift for z in logits]
    log_norm = total([z.exp() for z in shifted]).log()
    picked = total([tape.lift((labels == c) * 1.0) * z for c, z in enumerate(shifted)])
    loss = log_norm - picked
    return loss.mean() if np.ndim(loss.value) else loss


def cross_entropy_data(
    params: NetworkParams,
    x: np.ndarray,
    labels: np.ndarray,
    tape: Tape | None = None,
    bound: BoundNetwork | None = None,
) -> Var:
    x = _points(x, "x")
    if x is None or len(x) == 0:
        raise ShapeError("cross entropy needs at least one data point")
    tape = Tape() if tape is None else tape
    logits = forward(params, _input_lanes(tape, x), tape, bound)
    return cross_entropy(logits, np.asarray(labels, dtype=np.int64))


def mse_residual(
    params: NetworkParams,
    points: np.ndarray,
    residual: ResidualOperator,
    tape: Tape | None = None,
    bound: BoundNetwork | None = None,
    inverse: dict[str, Var] | None = None,
) -> Var:
    """(1/N_f) sum_i |F(x_f^i)|^2 with input derivatives built by derivative_graph."""
    points = _points(points, "points")
    if points is None or len(points) == 0:
        raise ShapeError("mse_residual needs at least one residual point")
    if points.shape[1] != residual.input_dim or params.widths[0] != residual.input_dim:
        raise ShapeError(f"residual '{residual.name}' expects {residual.input_dim} inputs")
    if params.widths[-1] != 1:
        raise ShapeError("residual operators act on scalar-output networks")
    tape = Tape() if tape is None else tape
    if inverse is None:
        inverse = {p.name: tape.lift(p.initial) for p in residual.inverse}
    inputs = _input_lanes(tape, points)
    u = forward(params, inputs, tape, bound)[0]
    ctx = ResidualContext(tape, u, inputs, inverse, residual.orders)
    return residual.builder(ctx).abs_sq().mean()


def slope_recovery(params: NetworkParams, kind: RecoveryKind, tape: Tape | None = None, bound: BoundNetwork | None = None) -> Var:
    """Slope recovery term S(a) = 1 / mean_k exp(a^k).

    GAAF uses 1 / exp(a); N-LAAF averages each layer's slopes before the exponential.
    """
    kind = RecoveryKind(kind)
    if kind is RecoveryKind.NONE or kind.value != params.mode.kind.value:
        raise ModeError(f"recovery kind {kind.value} does not apply to mode {params.mode.kind.value}")
    tape = Tape() if tape is None else tape
    if bound is None:
        bound = bind(params, tape)
    slopes = bound.slopes
    if kind is RecoveryKind.GAAF:
        return 1.0 / slopes[0].exp()
    hidden = params.widths[1:-1]
    if kind is RecoveryKind.LLAAF:
        return float(len(hidden)) / total([a.exp() for a in slopes])
    layer_means, cursor = [], 0
    for width in hidden:
        layer = slopes[cursor:cursor + width]
        cursor += width
        layer_means.append(total(layer) / float(width))
    return float(len(hidden)) / total([m.exp() for m in layer_means])


def loss_terms(
    params: NetworkParams,
    spec: ObjectiveSpec,
    tape: Tape | None = None,
    bound: BoundNetwork | None = None,
    inverse: dict[str, Var] | None = None,
) -> LossTerms:
    spec.check_mode(params)
    tape = Tape() if tape is None else tape
    if bound is None:
        bound = bind(params, tape)

    mse_u = mse_f = recovery = None
    if spec.n_u > 0:
        if spec.data_loss is DataLoss.CROSS_ENTROPY:
            mse_u = cross_entropy_data(params, spec.data_x, spec.data_u, tape, bound)
        else:
            mse_u = mse_data(params, spec.data_x, spec.data_u, tape, bound)
    if spec.w_f > 0:
        mse_f = mse_residual(params, spec.residual_x, spec.residual, tape, bound, inverse)
    if spec.recovery is not RecoveryKind.NONE:
        recovery = slope_recovery(params, spec.recovery, tape, bound)

    weighted = [
        weight * term
        for weight, term in ((spec.w_f, mse_f), (spec.w_u, mse_u), (spec.w_a, recovery))
        if term is not None and weight > 0
    ]
    return LossTerms(total(weighted) if weighted else tape.lift(0.0), mse_u, mse_f, recovery)


def total_loss(params: NetworkParams, spec: ObjectiveSpec, tape: Tape | None = None, **kwargs) -> Var:
    return loss_terms(params, spec, tape, **kwargs).total


@dataclass
class Evaluation:
    value: float
    grad: np.ndarray
    components: dict[str, float] = field(default_factory=dict)


class Objective:
    """Loss of a network plus inverse parameters as a function of one flat vector.

    Residual points are evaluated `residual_chunk` rows per tape so that large
    collocation sets never sit on one tape; the pieces are weighted by their
    share of the points and summed.
    """

    def __init__(
        self,
        params: NetworkParams,
        spec: ObjectiveSpec,
        freeze_slopes: bool = False,
        residual_chunk: int | None = RESIDUAL_CHUNK,
    ):
        spec.check_mode(params)
        if residual_chunk is not None and residual_chunk < 1:
            raise ShapeError(f"residual_chunk must be positive, got {residual_chunk}")
        self.params = params
        self.spec = spec
        self.residual_chunk = residual_chunk
        self.inverse: tuple[InverseParameter, ...] = tuple(spec.residual.inverse) if spec.residual else ()
        flat = flatten(params)
        self.network_size = flat.values.size
        self.slope_offset = flat.slope_offset
        self.freeze_slopes = freeze_slopes
        mask = np.ones(self.size, dtype=bool)
        if freeze_slopes:
            mask[self.slope_offset:self.network_size] = False
        for i, p in enumerate(self.inverse):
            mask[self.network_size + i] = p.trainable
        self.trainable = mask

    @property
    def size(self) -> int:
        return self.network_size + len(self.inverse)

    def initial_theta(self) -> np.ndarray:
        inverse = [p.initial for p in self.inverse]
        return np.concatenate([flatten(self.params).values, np.asarray(inverse, dtype=np.float64)])

    def network(self, theta: np.ndarray) -> NetworkParams:
        return with_values(self.params, self._check(theta)[: self.network_size])

    def inverse_values(self, theta: np.ndarray) -> dict[str, float]:
        theta = self._check(theta)
        return {p.name: float(theta[self.network_size + i]) for i, p in enumerate(self.inverse)}

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ShapeError(f"theta has shape {theta.shape}, objective expects ({self.size},)")
        return theta

    def _pieces(self) -> list[tuple[float, ObjectiveSpec]]:
        spec, chunk = self.spec, self.residual_chunk
        if spec.w_f == 0 or chunk is None or spec.n_f <= chunk:
            return [(1.0, spec)]
        pieces = [(1.0, replace(spec, w_f=0.0))]
        for start in range(0, spec.n_f, chunk):
            rows = spec.residual_x[start:start + chunk]
            part = replace(
                spec, w_u=0.0, w_a=0.0, data_x=None, data_u=None, recovery=RecoveryKind.NONE, residual_x=rows
            )
            pieces.append((len(rows) / spec.n_f, part))
        return pieces

    def _record(self, theta: np.ndarray, spec: ObjectiveSpec) -> tuple[Tape, LossTerms, list[Var]]:
        tape = Tape()
        bound = bind(self.params, tape, theta[: self.network_size])
        inverse_leaves = tape.lift_many(theta[self.network_size:])
        inverse = {p.name: leaf for p, leaf in zip(self.inverse, inverse_leaves)}
        terms = loss_terms(self.params, spec, tape, bound, inverse)
        if np.ndim(terms.total.value) != 0:
            raise ShapeError("objective must reduce to a scalar")
        return tape, terms, bound.leaves + inverse_leaves

    def _run(self, theta: np.ndarray, with_grad: bool) -> Evaluation:
        theta = self._check(theta)
        grad = np.zeros(self.size) if with_grad else np.empty(0)
        components = {"total": 0.0, "mse_u": 0.0, "mse_f": 0.0, "recovery": 0.0}
        for weight, spec in self._pieces():
            tape, terms, leaves = self._record(theta, spec)
            for name, value in terms.values().items():
                components[name] += weight * value
            if with_grad:
                grad += weight * tape.gradient(terms.total, leaves)
        if with_grad:
            grad[~self.trainable] = 0.0
        return Evaluation(components["total"], grad, components)

    def value(self, theta: np.ndarray) -> float:
        return self._run(theta, with_grad=False).value

    def components(self, theta: np.ndarray) -> dict[str, float]:
        return self._run(theta, with_grad=False).components

    def evaluate(self, theta: np.ndarray) -> Evaluation:
        return self._run(theta, with_grad=True)

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        result = self.evaluate(theta)
        return result.value, result.grad

    def batch(self, rows: np.ndarray) -> "Objective":
        clone = Objective.__new__(Objective)
        clone.__dict__.update(self.__dict__)
        clone.spec = self.spec.with_data_rows(rows)
        return clone
