# laaf/services/dynamics.py
"""Gradient-dynamics lab for adaptive activations.

With n = 1 an adaptive network with raw hidden parameters W and slopes a computes
the same function as a standard network with effective parameters

    theta~ = (A a) o W

where A is the 0/1 locality matrix sending every hidden weight or bias to the
slope that governs it. One plain gradient step on (a, W) moves theta~ exactly as

    theta~' = theta~ - eta G grad J(theta~)
    G = diag((A a)^2) + diag(W) A A^T diag(W) - eta diag(V)
    V = diag(A a) A A^T diag(W) grad J(theta~)

so adaptive activations precondition the standard dynamics. This module builds
A, G and V, checks that identity and the homogeneity identities of the slope
gradients, and measures preconditioned Hessian condition numbers along training.
Output-layer parameters carry no slope; they are a plain gradient-descent block
and G0 is extended by the identity over them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from tqdm import tqdm

from ..errors import DomainError, ModeError, ShapeError
from .autodiff import Tape
from .network import (
    ActivationMode,
    NetworkParams,
    Nonlinearity,
    ParamKey,
    SlopeMode,
    bind,
    count_parameters,
    effective_theta,
    flatten,
    hidden_parameter_count,
    init,
    param_keys,
    slope_index,
    to_standard,
)
from .objective import Objective, ObjectiveSpec, RecoveryKind, slope_recovery
from .optimize import LossFunction, OptimizerState, TraceRecord, train
from .problems import ProblemPreset

logger = logging.getLogger(__name__)

MAX_DENSE_SIZE = 2000
_BASE_AT_ZERO = {
    Nonlinearity.TANH: 0.0,
    Nonlinearity.SIGMOID: 0.5,
    Nonlinearity.RELU: 0.0,
    Nonlinearity.SOFTPLUS: float(np.log(2.0)),
    Nonlinearity.SIN: 0.0,
}


@dataclass
class LocalityMatrix:
    matrix: np.ndarray
    rows: tuple[ParamKey, ...]
    columns: tuple[ParamKey, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def _require_adaptive(params: NetworkParams) -> None:
    if not params.mode.has_slopes:
        raise ModeError("this check needs an adaptive activation mode")


def _require_unit_scale(params: NetworkParams) -> None:
    if params.mode.n != 1.0:
        raise ModeError(f"the conditioning analysis needs n = 1, got n = {params.mode.n}")


def locality_matrix(params: NetworkParams) -> LocalityMatrix:
    _require_adaptive(params)
    keys = param_keys(params.widths, params.mode.kind)
    d = hidden_parameter_count(params.widths)
    omega, beta = count_parameters(params.widths)
    rows, columns = keys[:d], keys[omega + beta:]
    matrix = np.zeros((d, len(columns)))
    for r, key in enumerate(rows):
        matrix[r, slope_index(params.widths, params.mode.kind, key.layer, key.position[0])] = 1.0
    return LocalityMatrix(matrix, rows, columns)


def _pieces(params: NetworkParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(W hidden, output block, slopes) in flat order."""
    values = flatten(params).values
    d = hidden_parameter_count(params.widths)
    omega, beta = count_parameters(params.widths)
    return values[:d], values[d:omega + beta], values[omega + beta:]


def conditioning_gaaf(a: float, W: np.ndarray):
    """G^ = a^2 I + W W^T for the global slope, and the builder g -> g g^T."""
    W = np.asarray(W, dtype=np.float64).ravel()
    g_hat = a * a * np.eye(W.size) + np.outer(W, W)

    def h_hat(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64).ravel()
        return np.outer(g, g)

    return g_hat, h_hat


def conditioning_g0(A: LocalityMatrix | np.ndarray, a: np.ndarray, W: np.ndarray) -> np.ndarray:
    """diag((A a)^2) + diag(W) A A^T diag(W), the eta-free part of G."""
    matrix = A.matrix if isinstance(A, LocalityMatrix) else np.asarray(A, dtype=np.float64)
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64).ravel()
    if matrix.shape != (W.size, a.size):
        raise ShapeError(f"A has shape {matrix.shape}, expected {(W.size, a.size)}")
    if W.size > MAX_DENSE_SIZE:
        raise ShapeError(f"{W.size} hidden parameters exceed the dense limit {MAX_DENSE_SIZE}")
    scale = matrix @ a
    coupling = matrix @ matrix.T
    return np.diag(scale * scale) + W[:, None] * coupling * W[None, :]


def conditioning_general(
    A: LocalityMatrix | np.ndarray, a: np.ndarray, W: np.ndarray, g: np.ndarray, eta: float
) -> tuple[np.ndarray, np.ndarray]:
    """(G, V) with V = diag(A a) A A^T diag(W) g and G = G0 - eta diag(V)."""
    matrix = A.matrix if isinstance(A, LocalityMatrix) else np.asarray(A, dtype=np.float64)
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if g.shape != W.shape:
        raise ShapeError(f"gradient has {g.size} entries, W has {W.size}")
    g0 = conditioning_g0(matrix, a, W)
    V = (matrix @ a) * (matrix @ (matrix.T @ (W * g)))
    return g0 - eta * np.diag(V), V


def _standard(params: NetworkParams, spec: ObjectiveSpec) -> tuple[Objective, np.ndarray]:
    """Objective J of the equivalent standard network and its theta at theta~."""
    base = params if not params.mode.has_slopes else to_standard(params)
    objective = Objective(base, spec.without_recovery())
    return objective, objective.initial_theta()


@dataclass
class EquivalenceReport:
    hidden_residual: float
    output_residual: float
    eta: float

    @property
    def residual(self) -> float:
        return max(self.hidden_residual, self.output_residual)


def verify_step_equivalence(
    params: NetworkParams,
    spec: ObjectiveSpec,
    eta: float,
    locality: LocalityMatrix | None = None,
) -> EquivalenceReport:
    """Compare one GD step on (a, W) with the conditioned step on theta~.

    The loss is `spec` without slope recovery. Inverse-problem parameters stay
    at their initial values.
    """
    _require_adaptive(params)
    _require_unit_scale(params)
    if not (np.isfinite(eta) and eta >= 0):
        raise DomainError(f"eta must be a nonnegative number, got {eta}")

    adaptive = Objective(params, spec.without_recovery())
    theta = adaptive.initial_theta()
    _, grad = adaptive.value_and_grad(theta)
    grad[adaptive.network_size:] = 0.0
    left = effective_theta(adaptive.network(theta - eta * grad))

    standard, standard_theta = _standard(params, spec)
    _, g_full = standard.value_and_grad(standard_theta)
    d = hidden_parameter_count(params.widths)
    omega, beta = count_parameters(params.widths)
    theta_tilde = effective_theta(params)
    W, _, a = _pieces(params)
    A = locality if locality is not None else locality_matrix(params)
    G, _ = conditioning_general(A, a, W, g_full[:d], eta)

    right_hidden = theta_tilde[:d] - eta * (G @ g_full[:d])
    right_output = theta_tilde[d:] - eta * g_full[d:omega + beta]
    report = EquivalenceReport(
        hidden_residual=float(np.max(np.abs(left[:d] - right_hidden), initial=0.0)),
        output_residual=float(np.max(np.abs(left[d:] - right_output), initial=0.0)),
        eta=eta,
    )
    logger.debug("step equivalence (%s, eta=%g): %.3e", params.mode.kind.value, eta, report.residual)
    return report


def corrupt_locality(locality: LocalityMatrix) -> LocalityMatrix:
    """Copy of A with the first row reassigned; a negative control for the equivalence check."""
    matrix = locality.matrix.copy()
    if matrix.shape[1] > 1:
        column = int(np.argmax(matrix[0]))
        matrix[0, column] = 0.0
        matrix[0, (column + 1) % matrix.shape[1]] = 1.0
    else:
        matrix[0, 0] = 0.0
    return LocalityMatrix(matrix, locality.rows, locality.columns)


@dataclass
class EulerReport:
    lhs: np.ndarray
    rhs: np.ndarray
    columns: tuple[ParamKey, ...]

    @property
    def residuals(self) -> np.ndarray:
        return np.abs(self.lhs - self.rhs)

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals, initial=0.0))


def _recovery_gradient(params: NetworkParams, kind: RecoveryKind) -> np.ndarray:
    tape = Tape()
    bound = bind(params, tape)
    adjoints = tape.backward(slope_recovery(params, kind, tape, bound))
    return np.array([adjoints[a.index] for a in bound.slopes], dtype=np.float64)


def euler_identity_check(params: NetworkParams, spec: ObjectiveSpec) -> EulerReport:
    """Per slope: a (dJ/da - W_a dS/da) against sum of theta dJ/dtheta over the parameters it governs.

    Scaling a slope by c and its parameters by 1/c leaves the network unchanged,
    so the two sides agree at every point, not only at critical points.
    """
    _require_adaptive(params)
    objective = Objective(params, spec)
    theta = objective.initial_theta()
    _, grad = objective.value_and_grad(theta)
    W, _, a = _pieces(params)
    d = W.size
    omega, beta = count_parameters(params.widths)
    slope_grad = grad[omega + beta:objective.network_size].copy()
    if spec.recovery is not RecoveryKind.NONE:
        slope_grad -= spec.w_a * _recovery_gradient(params, spec.recovery)
    A = locality_matrix(params)
    lhs = a * slope_grad
    rhs = A.matrix.T @ (W * grad[:d])
    return EulerReport(lhs, rhs, A.columns)


@dataclass
class ConstantNetworkReport:
    loss: float
    constant_loss: float
    recovery_at_zero: float
    constant_value: np.ndarray
    hidden_grad_max: float
    slope_grad: np.ndarray
    recovery_grad: np.ndarray

    @property
    def loss_gap(self) -> float:
        return abs(self.loss - (self.constant_loss + self.recovery_at_zero))


def constant_network_check(params: NetworkParams, spec: ObjectiveSpec) -> ConstantNetworkReport:
    """At all-zero slopes the loss equals that of a constant network plus W_a S(0).

    The constant loss is computed from a separate fixed-activation network with
    zero hidden parameters whose output bias is the constant.
    """
    _require_adaptive(params)
    if np.any(params.slopes != 0.0):
        raise DomainError("constant_network_check needs every slope exactly 0")
    objective = Objective(params, spec)
    value, grad = objective.value_and_grad(objective.initial_theta())

    hidden_out = np.full(params.widths[-2], _BASE_AT_ZERO[params.mode.base])
    constant = params.weights[-1] @ hidden_out + params.biases[-1]
    fixed = ActivationMode(SlopeMode.FIXED, params.mode.base, 1.0)
    weights = [np.zeros_like(w) for w in params.weights]
    biases = [np.zeros_like(b) for b in params.biases[:-1]] + [constant.copy()]
    constant_params = NetworkParams(params.widths, fixed, weights, biases)
    constant_loss = Objective(constant_params, spec.without_recovery()).value(
        np.concatenate([flatten(constant_params).values, objective.initial_theta()[objective.network_size:]])
    )

    recovery_at_zero = 0.0
    recovery_grad = np.zeros(params.slopes.size)
    if spec.recovery is not RecoveryKind.NONE:
        recovery_at_zero = spec.w_a * 1.0
        recovery_grad = _recovery_gradient(params, spec.recovery)

    d = hidden_parameter_count(params.widths)
    omega, beta = count_parameters(params.widths)
    return ConstantNetworkReport(
        loss=value,
        constant_loss=constant_loss,
        recovery_at_zero=recovery_at_zero,
        constant_value=constant,
        hidden_grad_max=float(np.max(np.abs(grad[:d]), initial=0.0)),
        slope_grad=grad[omega + beta:objective.network_size].copy(),
        recovery_grad=recovery_grad,
    )


@dataclass
class DescentReport:
    eta: float
    before: float
    after: float
    grad_norm: float

    @property
    def decreased(self) -> bool:
        return self.grad_norm <= 1e-8 or self.after < self.before


def descent_check(params: NetworkParams, spec: ObjectiveSpec, eta0: float = 1.0, halvings: int = 60) -> DescentReport:
    """Halve eta until the conditioned step lowers J(theta~)."""
    _require_adaptive(params)
    _require_unit_scale(params)
    standard, standard_theta = _standard(params, spec)
    before, g = standard.value_and_grad(standard_theta)
    grad_norm = float(np.linalg.norm(g))
    adaptive = Objective(params, spec.without_recovery())
    theta = adaptive.initial_theta()
    _, grad = adaptive.value_and_grad(theta)
    grad[adaptive.network_size:] = 0.0

    eta, after = eta0, before
    for _ in range(halvings + 1):
        moved = effective_theta(adaptive.network(theta - eta * grad))
        try:
            after = standard.value(np.concatenate([moved, standard_theta[moved.size:]]))
        except DomainError:
            after = np.inf
        if grad_norm <= 1e-8 or after < before:
            break
        eta *= 0.5
    return DescentReport(eta, before, after, grad_norm)


def hessian_fd(loss: LossFunction, point: np.ndarray, step: float = 1e-4, symmetric: bool = True) -> np.ndarray:
    """Central differences of autodiff gradients; column i is dgrad/dtheta_i."""
    if not step > 0:
        raise DomainError("finite-difference step must be positive")
    point = np.asarray(point, dtype=np.float64)
    if point.size > MAX_DENSE_SIZE:
        raise ShapeError(f"{point.size} parameters exceed the dense limit {MAX_DENSE_SIZE}")
    hessian = np.empty((point.size, point.size))
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] = point[i] + step
        plus = loss.value_and_grad(shifted)[1]
        shifted[i] = point[i] - step
        minus = loss.value_and_grad(shifted)[1]
        hessian[:, i] = (plus - minus) / (2.0 * step)
    if not np.all(np.isfinite(hessian)):
        raise DomainError("Hessian has non-finite entries")
    return 0.5 * (hessian + hessian.T) if symmetric else hessian


def condition_number(G0: np.ndarray, H: np.ndarray) -> float:
    """sigma_max / sigma_min of M = G0^{1/2} H G0^{1/2}."""
    G0 = np.asarray(G0, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if G0.shape != H.shape or G0.ndim != 2 or G0.shape[0] != G0.shape[1]:
        raise ShapeError(f"G0 {G0.shape} and H {H.shape} must be equal square matrices")
    for name, matrix in (("G0", G0), ("H", H)):
        scale = max(1.0, float(np.max(np.abs(matrix), initial=0.0)))
        if np.max(np.abs(matrix - matrix.T), initial=0.0) > 1e-10 * scale:
            raise DomainError(f"{name} is not symmetric")

    eigenvalues, vectors = np.linalg.eigh(G0)
    if eigenvalues.min(initial=0.0) < -1e-10:
        logger.warning("clamping negative eigenvalue %.3e of G0 to 0", eigenvalues.min())
    root = (vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T
    singular = np.linalg.svd(root @ H @ root, compute_uv=False)
    return float(singular.max() / max(singular.min(), 1e-300))


def preconditioner(params: NetworkParams) -> np.ndarray:
    """G0 over all standard parameters: hidden block from A, identity on the output layer."""
    omega, beta = count_parameters(params.widths)
    if not params.mode.has_slopes:
        return np.eye(omega + beta)
    _require_unit_scale(params)
    W, _, a = _pieces(params)
    d = W.size
    full = np.eye(omega + beta)
    full[:d, :d] = conditioning_g0(locality_matrix(params), a, W)
    return full


def state_condition(params: NetworkParams, spec: ObjectiveSpec, step: float = 1e-4) -> float:
    standard, theta = _standard(params, spec)
    omega, beta = count_parameters(params.widths)
    hessian = hessian_fd(standard, theta, step)[: omega + beta, : omega + beta]
    return condition_number(preconditioner(params), hessian)


def normalized_condition_trace(conditions: Sequence[float], baseline: Sequence[float] | None) -> list[float]:
    """Running minimum of `conditions` over the standard run's initial condition number."""
    if baseline is None or len(baseline) == 0:
        raise DomainError("normalized condition needs the standard baseline run")
    reference = float(baseline[0])
    running = np.minimum.accumulate(np.asarray(conditions, dtype=np.float64))
    return [float(c) / reference for c in running]


@dataclass
class ConditionRun:
    method: SlopeMode
    seed: int
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    conditions: list[float] = field(default_factory=list)
    normalized: list[float] = field(default_factory=list)
    final_params: NetworkParams | None = None
    spec: ObjectiveSpec | None = None


def condition_run(
    preset: ProblemPreset,
    method: SlopeMode,
    seed: int,
    recovery_weight: float = 0.0,
    hessian_every: int = 1,
    hessian_step: float = 1e-4,
    progress: bool = False,
) -> ConditionRun:
    """Train one method on the preset and sample the preconditioned condition number per epoch.

    The recorded loss is the data loss. Epochs between Hessian samples repeat
    the last sampled value.
    """
    method = SlopeMode(method)
    if hessian_every < 1:
        raise DomainError("hessian_every must be >= 1")
    mode = ActivationMode(method, preset.base, preset.n)
    params = init(preset.widths, mode, seed)
    use_recovery = method is not SlopeMode.FIXED and recovery_weight > 0
    spec = ObjectiveSpec(
        w_f=preset.w_f,
        w_u=preset.w_u,
        w_a=recovery_weight if use_recovery else 0.0,
        data_x=preset.data_x,
        data_u=preset.data_u,
        residual_x=preset.residual_x,
        residual=preset.residual,
        recovery=RecoveryKind(method.value) if use_recovery else RecoveryKind.NONE,
        data_loss=preset.data_loss,
    )
    objective = Objective(params, spec)
    state = OptimizerState(kind=preset.optimizer, learning_rate=preset.learning_rate)
    run = ConditionRun(method, seed)

    def observe(record: TraceRecord, theta: np.ndarray) -> None:
        run.epochs.append(record.iteration)
        run.losses.append(record.mse_u)
        if record.iteration % hessian_every == 0 or record.iteration == preset.iterations or not run.conditions:
            run.conditions.append(state_condition(objective.network(theta), spec, hessian_step))
        else:
            run.conditions.append(run.conditions[-1])

    trace = train(
        objective, state, preset.iterations, sink=observe, batch_size=preset.batch_size, seed=seed, progress=progress
    )
    run.final_params = objective.network(trace.theta)
    run.spec = spec
    logger.info(
        "%s seed %d: final loss %.4e, condition %.4e", method.value, seed, run.losses[-1], run.conditions[-1]
    )
    return run


def condition_study(
    preset: ProblemPreset,
    seed: int,
    methods: Sequence[SlopeMode] = tuple(SlopeMode),
    recovery_weight: float = 0.0,
    hessian_every: int = 1,
    progress: bool = False,
) -> dict[SlopeMode, ConditionRun]:
    """Standard and adaptive runs from identical data and initial weights, normalized by the standard run."""
    methods = [SlopeMode(m) for m in methods]
    if SlopeMode.FIXED not in methods:
        methods.insert(0, SlopeMode.FIXED)
    runs = {}
    for method in tqdm(methods, disable=not progress, desc="methods", leave=False):
        runs[method] = condition_run(preset, method, seed, recovery_weight, hessian_every, progress=progress)
    baseline = runs[SlopeMode.FIXED].conditions
    for run in runs.values():
        run.normalized = normalized_condition_trace(run.conditions, baseline)
    return runs


@dataclass
class DynamicsReport:
    G: np.ndarray
    V: np.ndarray
    H_hat: np.ndarray
    hessian: np.ndarray
    condition_number: float
    normalized_condition: float
    equivalence_residual: float
    eta: float
    mode: SlopeMode

    def to_dict(self, full: bool = False) -> dict:
        summary = {
            "mode": self.mode.value,
            "eta": self.eta,
            "condition_number": self.condition_number,
            "normalized_condition": self.normalized_condition,
            "equivalence_residual": self.equivalence_residual,
            "preconditioner": "G0 without the eta diag(V) term, identity on the output layer",
            "dimension": int(self.G.shape[0]),
        }
        if full:
            summary.update(
                G=self.G.tolist(), V=self.V.tolist(), H_hat=self.H_hat.tolist(), hessian=self.hessian.tolist()
            )
        return summary


def dynamics_report(
    params: NetworkParams,
    spec: ObjectiveSpec,
    eta: float = 0.01,
    hessian_step: float = 1e-4,
    baseline_condition: float | None = None,
) -> DynamicsReport:
    """All conditioning quantities at one training state.

    Without `baseline_condition` the condition number is normalized by that of
    the unpreconditioned Hessian at the same theta~.
    """
    _require_adaptive(params)
    _require_unit_scale(params)
    standard, theta = _standard(params, spec)
    _, g_full = standard.value_and_grad(theta)
    omega, beta = count_parameters(params.widths)
    W, _, a = _pieces(params)
    g = g_full[: W.size]
    G, V = conditioning_general(locality_matrix(params), a, W, g, eta)
    hessian = hessian_fd(standard, theta, hessian_step)[: omega + beta, : omega + beta]
    condition = condition_number(preconditioner(params), hessian)
    if baseline_condition is None:
        baseline_condition = condition_number(np.eye(omega + beta), hessian)
    return DynamicsReport(
        G=G,
        V=V,
        H_hat=np.outer(g, g),
        hessian=hessian,
        condition_number=condition,
        normalized_condition=condition / baseline_condition,
        equivalence_residual=verify_step_equivalence(params, spec, eta).residual,
        eta=eta,
        mode=params.mode.kind,
    )
