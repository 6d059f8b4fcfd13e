# laaf/services/optimize.py
"""First-order optimizers and the training loop.

Learning-rate regimes: constant, diminishing eta_0 / (1 + m) and Armijo
backtracking, all plain gradient descent, plus Adam with bias correction.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

import numpy as np
from tqdm import tqdm

from ..errors import DivergenceError, DomainError, LineSearchError, ShapeError
from .autodiff import ScalarFunction, function_value, value_and_grad
from .seeding import stream

logger = logging.getLogger(__name__)

MAX_BACKTRACKS = 60


class OptimizerKind(str, Enum):
    GD_CONSTANT = "gd_constant"
    GD_DIMINISHING = "gd_diminishing"
    GD_ARMIJO = "gd_armijo"
    ADAM = "adam"


class LossFunction(Protocol):
    def value(self, theta: np.ndarray) -> float: ...

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]: ...


class FunctionObjective:
    """Adapter giving a plain tape function the objective interface."""

    def __init__(self, f: ScalarFunction):
        self.f = f

    def value(self, theta: np.ndarray) -> float:
        return function_value(self.f, np.asarray(theta, dtype=np.float64))

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        return value_and_grad(self.f, theta)


@dataclass
class OptimizerState:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1.0e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    armijo_beta: float = 0.5
    armijo_sigma: float = 1.0e-4
    step_count: int = 0
    first: np.ndarray | None = None
    second: np.ndarray | None = None
    last_rate: float | None = None

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise DomainError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DomainError("Adam betas must lie in [0, 1)")

    def current_rate(self) -> float:
        if self.kind is OptimizerKind.GD_DIMINISHING:
            return self.learning_rate / (1.0 + self.step_count)
        return self.learning_rate


def armijo_search(
    theta: np.ndarray,
    loss_fn: LossFunction,
    direction: np.ndarray,
    eta0: float,
    beta: float = 0.5,
    sigma: float = 1.0e-4,
    value: float | None = None,
    grad: np.ndarray | None = None,
) -> float:
    """Largest eta in {eta0 beta^j} with J(theta + eta d) <= J(theta) + sigma eta grad.d."""
    if not 0.0 < beta < 1.0 or not 0.0 < sigma < 1.0:
        raise DomainError(f"Armijo needs 0 < beta < 1 and 0 < sigma < 1, got beta={beta}, sigma={sigma}")
    if not eta0 > 0:
        raise DomainError(f"initial step must be positive, got {eta0}")
    theta = np.asarray(theta, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if value is None or grad is None:
        value, grad = loss_fn.value_and_grad(theta)
    slope = float(np.dot(grad, direction))
    if not slope < 0:
        raise LineSearchError(f"not a descent direction (grad . d = {slope:.3e})")

    eta = eta0
    for _ in range(MAX_BACKTRACKS + 1):
        try:
            trial = loss_fn.value(theta + eta * direction)
        except DomainError:
            trial = np.inf
        if np.isfinite(trial) and trial <= value + sigma * eta * slope:
            return eta
        eta *= beta
    raise LineSearchError(f"no acceptable step within {MAX_BACKTRACKS} backtracks from eta={eta0}")


def update(
    state: OptimizerState,
    theta: np.ndarray,
    grad: np.ndarray,
    loss_fn: LossFunction | None = None,
    value: float | None = None,
) -> np.ndarray:
    """One optimizer move from theta given the gradient there. Advances state."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameters {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient at step {state.step_count}", iteration=state.step_count)

    kind = state.kind
    if kind is OptimizerKind.ADAM:
        if state.first is None or state.first.shape != theta.shape:
            state.first = np.zeros_like(theta)
            state.second = np.zeros_like(theta)
        state.step_count += 1
        t = state.step_count
        state.first = state.beta1 * state.first + (1.0 - state.beta1) * grad
        state.second = state.beta2 * state.second + (1.0 - state.beta2) * grad * grad
        first_hat = state.first / (1.0 - state.beta1**t)
        second_hat = state.second / (1.0 - state.beta2**t)
        state.last_rate = state.learning_rate
        return theta - state.learning_rate * first_hat / (np.sqrt(second_hat) + state.eps)

    if kind is OptimizerKind.GD_ARMIJO:
        if loss_fn is None:
            raise DomainError("Armijo steps need the loss function")
        state.step_count += 1
        if not np.any(grad):
            state.last_rate = 0.0
            return theta.copy()
        eta = armijo_search(
            theta, loss_fn, -grad, state.learning_rate, state.armijo_beta, state.armijo_sigma, value, grad
        )
        state.last_rate = eta
        return theta - eta * grad

    eta = state.current_rate()
    state.step_count += 1
    state.last_rate = eta
    return theta - eta * grad


def step(state: OptimizerState, theta: np.ndarray, loss_fn: LossFunction) -> np.ndarray:
    value, grad = loss_fn.value_and_grad(theta)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {state.step_count}", iteration=state.step_count)
    return update(state, theta, grad, loss_fn, value)


@dataclass
class TraceRecord:
    iteration: int
    total: float
    mse_u: float
    mse_f: float
    recovery: float
    slope_min: float | None = None
    slope_mean: float | None = None
    slope_max: float | None = None
    inverse: dict[str, float] = field(default_factory=dict)
    wall_ms: float | None = None
    # every slope value at this iteration, in flat order; None without slopes
    slopes: np.ndarray | None = None


@dataclass
class TrainingTrace:
    records: list[TraceRecord] = field(default_factory=list)
    theta: np.ndarray | None = None
    inverse_names: tuple[str, ...] = ()

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def losses(self) -> np.ndarray:
        return np.array([r.total for r in self.records])


TraceSink = Callable[[TraceRecord, np.ndarray], None]


def _record(objective, iteration: int, theta: np.ndarray, evaluation, started: float | None) -> TraceRecord:
    slopes = theta[objective.slope_offset:objective.network_size]
    stats = (float(slopes.min()), float(slopes.mean()), float(slopes.max())) if slopes.size else (None, None, None)
    components = evaluation.components
    return TraceRecord(
        iteration=iteration,
        total=evaluation.value,
        mse_u=components.get("mse_u", 0.0),
        mse_f=components.get("mse_f", 0.0),
        recovery=components.get("recovery", 0.0),
        slope_min=stats[0],
        slope_mean=stats[1],
        slope_max=stats[2],
        inverse=objective.inverse_values(theta),
        wall_ms=None if started is None else (time.perf_counter() - started) * 1000.0,
        slopes=slopes.copy() if slopes.size else None,
    )


def _evaluate_or_diverge(objective, theta: np.ndarray, iteration: int, trace: TrainingTrace):
    try:
        evaluation = objective.evaluate(theta)
    except DomainError as ex:
        raise DivergenceError(f"evaluation failed at iteration {iteration}: {ex}", iteration, trace) from ex
    if not (np.isfinite(evaluation.value) and np.all(np.isfinite(evaluation.grad))):
        raise DivergenceError(f"non-finite loss or gradient at iteration {iteration}", iteration, trace)
    return evaluation


def train(
    objective,
    state: OptimizerState,
    iterations: int,
    theta: np.ndarray | None = None,
    sink: TraceSink | None = None,
    batch_size: int | None = None,
    seed: int = 0,
    record_timing: bool = False,
    progress: bool = False,
) -> TrainingTrace:
    """Run the optimizer and record iteration 0 (the start) through `iterations`.

    With `batch_size` set, one iteration is an epoch of shuffled mini-batches
    over the data points and each record is the full-data loss after the epoch.
    """
    if iterations < 0:
        raise DomainError("iterations must be >= 0")
    theta = objective.initial_theta() if theta is None else np.asarray(theta, dtype=np.float64).copy()
    trace = TrainingTrace(inverse_names=tuple(p.name for p in objective.inverse))
    started = time.perf_counter() if record_timing else None

    def emit(record: TraceRecord, theta: np.ndarray) -> None:
        trace.records.append(record)
        if sink is not None:
            sink(record, theta)

    evaluation = _evaluate_or_diverge(objective, theta, 0, trace)
    emit(_record(objective, 0, theta, evaluation, started), theta)
    batches = stream(seed, "batches") if batch_size else None

    for m in tqdm(range(1, iterations + 1), disable=not progress, desc="train", leave=False):
        try:
            if batches is None:
                theta = update(state, theta, evaluation.grad, objective, evaluation.value)
            else:
                order = batches.permutation(objective.spec.n_u)
                for start in range(0, len(order), batch_size):
                    part = objective.batch(order[start:start + batch_size])
                    mini = _evaluate_or_diverge(part, theta, m, trace)
                    theta = update(state, theta, mini.grad, part, mini.value)
        except (DivergenceError, LineSearchError) as ex:
            trace.theta = theta
            if isinstance(ex, DivergenceError):
                ex.iteration, ex.trace = m, trace
                raise
            raise DivergenceError(f"line search failed at iteration {m}: {ex}", m, trace) from ex
        evaluation = _evaluate_or_diverge(objective, theta, m, trace)
        emit(_record(objective, m, theta, evaluation, started), theta)

    trace.theta = theta
    logger.info("trained %d iterations, final loss %.6e", iterations, trace.final.total)
    return trace
