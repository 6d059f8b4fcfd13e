# laaf/services/problems.py
"""
Experiment presets: datasets, PDE residual operators and exact solutions.

Presets (see PRESETS):
- discontinuous    : regression of a function with a jump and mixed frequencies on [-3, 3]
- poisson_inverse  : identify alpha in div((1 + alpha x) grad u) + f* = 0 on a square,
                     f* manufactured so u* = cos(pi x) cos(pi y) is exact at alpha_true
- burgers_inverse  : identify nu in u_t + u u_x = nu u_xx from a viscous traveling wave
- circles_*        : two concentric noisy circles, softmax classifier (gradient-dynamics study)

Every random draw comes from a named sub-stream of the run seed:
"data" (training points), "sampling" (collocation points), "noise" (target noise).
"""
from __future__ import annotations

import inspect
import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, DomainError, ShapeError
from .autodiff import Tape, Var
from .network import Nonlinearity
from .seeding import stream

logger = logging.getLogger(__name__)

MAX_DERIVATIVE_ORDER = 4


@dataclass(frozen=True)
class InverseParameter:
    name: str
    initial: float
    trainable: bool = True
    true_value: float | None = None


class ResidualContext:
    """What a residual builder sees: the network output, its inputs and the inverse parameters.

    Input derivatives are built with derivative_graph on first request and cached,
    so u_xx reuses u_x.
    """

    def __init__(self, tape: Tape, u: Var, inputs: Sequence[Var], inverse: dict[str, Var], orders: Sequence[int]):
        if len(orders) != len(inputs):
            raise ShapeError(f"{len(orders)} derivative orders declared for {len(inputs)} inputs")
        self.tape = tape
        self.u = u
        self.inputs = list(inputs)
        self.inverse = dict(inverse)
        self.orders = tuple(orders)
        self.requested = [0] * len(inputs)
        self._cache: dict[tuple[int, int], Var] = {}

    def x(self, axis: int) -> Var:
        return self.inputs[axis]

    def param(self, name: str) -> Var:
        if name not in self.inverse:
            raise DomainError(f"unknown inverse parameter '{name}'")
        return self.inverse[name]

    def lift(self, value) -> Var:
        return self.tape.lift(value)

    def d(self, axis: int, order: int = 1) -> Var:
        """order-th derivative of u along input `axis`."""
        if not 0 <= axis < len(self.inputs):
            raise ShapeError(f"no input axis {axis}")
        if order < 1 or order > min(self.orders[axis], MAX_DERIVATIVE_ORDER):
            raise DomainError(f"unsupported derivative order {order} along axis {axis}")
        self.requested[axis] = max(self.requested[axis], order)
        key = (axis, order)
        if key not in self._cache:
            below = self.u if order == 1 else self.d(axis, order - 1)
            self._cache[key] = self.tape.derivative_graph(below, self.inputs[axis])
        return self._cache[key]


@dataclass(frozen=True)
class ResidualOperator:
    name: str
    input_dim: int
    orders: tuple[int, ...]
    builder: Callable[[ResidualContext], Var]
    inverse: tuple[InverseParameter, ...] = ()


Solution = Callable[[Tape, list[Var]], Var]


def evaluate_residual(
    operator: ResidualOperator,
    solution: Solution,
    points: np.ndarray,
    inverse_values: dict[str, float] | None = None,
) -> np.ndarray:
    """Residual of `solution` (a tape expression of the inputs) at every point."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != operator.input_dim:
        raise ShapeError(f"'{operator.name}' expects {operator.input_dim}-D points")
    inverse_values = inverse_values or {}
    tape = Tape()
    inputs = [tape.lift(points[:, i].copy()) for i in range(points.shape[1])]
    u = solution(tape, inputs)
    inverse = {p.name: tape.lift(inverse_values.get(p.name, p.initial)) for p in operator.inverse}
    ctx = ResidualContext(tape, u, inputs, inverse, operator.orders)
    return np.broadcast_to(operator.builder(ctx).value, (len(points),)).copy()


@dataclass
class ProblemPreset:
    name: str
    widths: tuple[int, ...]
    base: Nonlinearity
    n: float
    learning_rate: float
    iterations: int
    w_f: float
    w_u: float
    w_a: float
    data_x: np.ndarray
    data_u: np.ndarray
    residual_x: np.ndarray | None = None
    residual: ResidualOperator | None = None
    reference: Callable[[np.ndarray], np.ndarray] | None = None
    eval_x: np.ndarray | None = None
    data_loss: str = "mse"
    optimizer: str = "adam"
    batch_size: int | None = None
    seed: int = 0
    settings: dict = field(default_factory=dict)

    @property
    def inverse(self) -> tuple[InverseParameter, ...]:
        return self.residual.inverse if self.residual else ()


# -- samplers ------------------------------------------------------------


def _check_box(box: Sequence[Sequence[float]]) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] < 1:
        raise ShapeError(f"box must be a list of (low, high) pairs, got {box.tolist()}")
    if not np.all(np.isfinite(box)) or np.any(box[:, 1] <= box[:, 0]):
        raise DomainError(f"degenerate box {box.tolist()}")
    return box


def collocation_sample(box: Sequence[Sequence[float]], count: int, seed: int, name: str = "sampling") -> np.ndarray:
    """`count` i.i.d. uniform points in an axis-aligned box, shape (count, dim)."""
    box = _check_box(box)
    if count < 1:
        raise ShapeError("collocation count must be >= 1")
    rng = stream(seed, name)
    return rng.uniform(box[:, 0], box[:, 1], size=(count, box.shape[0]))


def _noisy(targets: np.ndarray, level: float, seed: int) -> np.ndarray:
    """Add Gaussian noise with standard deviation `level * std(targets)`, i.e. relative to the spread of the targets."""
    if level <= 0:
        return targets
    rng = stream(seed, "noise")
    return targets + level * np.std(targets) * rng.standard_normal(targets.shape)


def _grid(box: np.ndarray, per_axis: Sequence[int]) -> np.ndarray:
    axes = [np.linspace(lo, hi, count) for (lo, hi), count in zip(box, per_axis)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


# -- discontinuous regression ----------------------------------------------


def discontinuous_target(x):
    """0.2 sin(6x) for x <= 0, 1 + 0.1 x cos(18x) otherwise."""
    x = np.asarray(x, dtype=np.float64)
    value = np.where(x <= 0, 0.2 * np.sin(6.0 * x), 1.0 + 0.1 * x * np.cos(18.0 * x))
    return float(value) if value.ndim == 0 else value


def discontinuous_preset(seed: int, n_points: int = 300, iterations: int = 15000, learning_rate: float = 2.0e-4) -> ProblemPreset:
    x = stream(seed, "data").uniform(-3.0, 3.0, size=(n_points, 1))
    return ProblemPreset(
        name="discontinuous",
        widths=(1, 50, 50, 50, 50, 1),
        base=Nonlinearity.TANH,
        n=10.0,
        learning_rate=learning_rate,
        iterations=iterations,
        w_f=0.0,
        w_u=1.0,
        w_a=1.0,
        data_x=x,
        data_u=discontinuous_target(x),
        reference=discontinuous_target,
        eval_x=np.linspace(-3.0, 3.0, 1001)[:, None],
        seed=seed,
        settings={"n_points": n_points},
    )


# -- Poisson diffusion-coefficient inverse ----------------------------------

POISSON_HALF_WIDTH = 1.0 / np.sqrt(2.0)
POISSON_BOX = ((-POISSON_HALF_WIDTH, POISSON_HALF_WIDTH), (-POISSON_HALF_WIDTH, POISSON_HALF_WIDTH))


def poisson_solution(points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(points)
    return np.cos(np.pi * points[:, 0]) * np.cos(np.pi * points[:, 1])


def poisson_solution_var(tape: Tape, inputs: list[Var]) -> Var:
    x, y = inputs
    return (np.pi * x).cos() * (np.pi * y).cos()


def poisson_source(x, y, alpha_true: float):
    """f* = -div((1 + alpha_true x) grad u*) for u* = cos(pi x) cos(pi y)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    pi = np.pi
    u_x = -pi * np.sin(pi * x) * np.cos(pi * y)
    laplacian = -2.0 * pi**2 * np.cos(pi * x) * np.cos(pi * y)
    return -(alpha_true * u_x + (1.0 + alpha_true * x) * laplacian)


def poisson_operator(alpha_true: float, alpha_init: float = 0.5) -> ResidualOperator:
    def build(ctx: ResidualContext) -> Var:
        x, y = ctx.x(0), ctx.x(1)
        alpha = ctx.param("alpha")
        diffusion = 1.0 + alpha * x
        source = ctx.lift(poisson_source(x.value, y.value, alpha_true))
        return alpha * ctx.d(0) + diffusion * (ctx.d(0, 2) + ctx.d(1, 2)) + source

    return ResidualOperator(
        name="poisson_variable_diffusion",
        input_dim=2,
        orders=(2, 2),
        builder=build,
        inverse=(InverseParameter("alpha", alpha_init, True, alpha_true),),
    )


def _square_boundary(rng: np.random.Generator, count: int, half: float) -> np.ndarray:
    side = rng.integers(0, 4, size=count)
    position = rng.uniform(-half, half, size=count)
    fixed = np.where(side % 2 == 0, -half, half)
    return np.where((side < 2)[:, None], np.column_stack([fixed, position]), np.column_stack([position, fixed]))


def poisson_inverse_preset(
    seed: int,
    alpha_true: float = 0.7,
    alpha_init: float = 0.5,
    noise: bool = False,
    noise_level: float = 0.025,
    n_boundary: int = 200,
    n_interior: int = 100,
    n_collocation: int = 1000,
    iterations: int = 20000,
    learning_rate: float = 8.0e-4,
) -> ProblemPreset:
    if not 0.05 <= alpha_true <= 0.95:
        raise DomainError(f"alpha_true must lie in [0.05, 0.95], got {alpha_true}")
    rng = stream(seed, "data")
    boundary = _square_boundary(rng, n_boundary, POISSON_HALF_WIDTH)
    box = np.asarray(POISSON_BOX)
    interior = rng.uniform(box[:, 0], box[:, 1], size=(n_interior, 2))
    data_x = np.vstack([boundary, interior])
    data_u = poisson_solution(data_x)[:, None]
    if noise:
        data_u = _noisy(data_u, noise_level, seed)
    return ProblemPreset(
        name="poisson_inverse",
        widths=(2, 30, 30, 30, 1),
        base=Nonlinearity.TANH,
        n=1.0,
        learning_rate=learning_rate,
        iterations=iterations,
        w_f=1.0,
        w_u=10.0,
        w_a=10.0,
        data_x=data_x,
        data_u=data_u,
        residual_x=collocation_sample(POISSON_BOX, n_collocation, seed),
        residual=poisson_operator(alpha_true, alpha_init),
        reference=poisson_solution,
        eval_x=_grid(box, (51, 51)),
        seed=seed,
        settings={"alpha_true": alpha_true, "noise": noise, "noise_level": noise_level},
    )


# -- viscous Burgers inverse ---------------------------------------------------

BURGERS_BOX = ((-1.0, 1.0), (0.0, 0.5))


def burgers_wave(points: np.ndarray, nu: float, a: float = 2.0, b: float = 0.0) -> np.ndarray:
    """Traveling wave (a+b)/2 - (a-b)/2 tanh((a-b)(x - ct) / (4 nu)), c = (a+b)/2."""
    points = np.atleast_2d(points)
    c = 0.5 * (a + b)
    return c - 0.5 * (a - b) * np.tanh((a - b) * (points[:, 0] - c * points[:, 1]) / (4.0 * nu))


def burgers_wave_var(nu: float, a: float = 2.0, b: float = 0.0) -> Solution:
    c = 0.5 * (a + b)

    def solution(tape: Tape, inputs: list[Var]) -> Var:
        x, t = inputs
        return c - 0.5 * (a - b) * ((a - b) / (4.0 * nu) * (x - c * t)).tanh()

    return solution


def burgers_operator(nu_true: float, nu_init: float = 0.5) -> ResidualOperator:
    def build(ctx: ResidualContext) -> Var:
        nu = ctx.param("nu")
        return ctx.d(1) + ctx.u * ctx.d(0) - nu * ctx.d(0, 2)

    return ResidualOperator(
        name="viscous_burgers",
        input_dim=2,
        orders=(2, 1),
        builder=build,
        inverse=(InverseParameter("nu", nu_init, True, nu_true),),
    )


def burgers_inverse_preset(
    seed: int,
    nu_true: float = 0.05,
    left_state: float = 2.0,
    right_state: float = 0.0,
    nu_init: float = 0.5,
    n_data: int = 300,
    n_collocation: int = 8000,
    iterations: int = 40000,
    learning_rate: float = 6.0e-4,
) -> ProblemPreset:
    if not (np.isfinite(nu_true) and nu_true > 0):
        raise DomainError(f"nu_true must be positive, got {nu_true}")
    if not left_state > right_state:
        raise DomainError(f"left state {left_state} must exceed right state {right_state}")
    box = np.asarray(BURGERS_BOX)
    data_x = stream(seed, "data").uniform(box[:, 0], box[:, 1], size=(n_data, 2))
    reference = partial(burgers_wave, nu=nu_true, a=left_state, b=right_state)
    return ProblemPreset(
        name="burgers_inverse",
        widths=(2, 20, 20, 20, 20, 20, 20, 1),
        base=Nonlinearity.TANH,
        n=5.0,
        learning_rate=learning_rate,
        iterations=iterations,
        w_f=1.0,
        w_u=10.0,
        w_a=20.0,
        data_x=data_x,
        data_u=reference(data_x)[:, None],
        residual_x=collocation_sample(BURGERS_BOX, n_collocation, seed),
        residual=burgers_operator(nu_true, nu_init),
        reference=reference,
        eval_x=_grid(box, (101, 51)),
        seed=seed,
        settings={"nu_true": nu_true, "left_state": left_state, "right_state": right_state},
    )


# -- concentric circles ----------------------------------------------------------


def circles_dataset(n_samples: int = 1000, noise: float = 0.01, factor: float = 0.7, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Outer unit circle (label 0) and inner circle of radius `factor` (label 1), shuffled."""
    if not 0.0 < factor < 1.0:
        raise DomainError(f"factor must lie in (0, 1), got {factor}")
    if noise < 0:
        raise DomainError(f"noise must be >= 0, got {noise}")
    if n_samples < 2:
        raise ShapeError("need at least one sample per class")
    rng = stream(seed, "data")
    n_outer = n_samples // 2
    n_inner = n_samples - n_outer
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n_samples)
    radius = np.concatenate([np.ones(n_outer), np.full(n_inner, factor)])
    x = np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])
    labels = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    if noise > 0:
        x = x + noise * stream(seed, "noise").standard_normal(x.shape)
    order = rng.permutation(n_samples)
    return x[order], labels[order]


def circles_preset(
    seed: int,
    base: str = "sigmoid",
    width: int = 10,
    n_samples: int = 1000,
    noise: float = 0.01,
    factor: float = 0.7,
    epochs: int = 50,
    learning_rate: float = 0.01,
    batch_size: int = 64,
) -> ProblemPreset:
    """Two-circles classification with one hidden layer, trained with mini-batch Adam."""
    x, labels = circles_dataset(n_samples, noise, factor, seed)
    return ProblemPreset(
        name=f"circles_{Nonlinearity(base).value}_{width}",
        widths=(2, width, 2),
        base=Nonlinearity(base),
        n=1.0,
        learning_rate=learning_rate,
        iterations=epochs,
        w_f=0.0,
        w_u=1.0,
        w_a=0.0,
        data_x=x,
        data_u=labels,
        data_loss="cross_entropy",
        optimizer="adam",
        batch_size=batch_size,
        seed=seed,
        settings={"n_samples": n_samples, "noise": noise, "factor": factor},
    )


PRESETS: dict[str, Callable[..., ProblemPreset]] = {
    "discontinuous": discontinuous_preset,
    "poisson_inverse": poisson_inverse_preset,
    "burgers_inverse": burgers_inverse_preset,
    "circles": circles_preset,
    "circles_sigmoid_10": partial(circles_preset, base="sigmoid", width=10),
    "circles_sigmoid_20": partial(circles_preset, base="sigmoid", width=20),
    "circles_relu_20": partial(circles_preset, base="relu", width=20),
    "circles_relu_100": partial(circles_preset, base="relu", width=100),
    "circles_softplus_100": partial(circles_preset, base="softplus", width=100),
}


def build_preset(name: str, seed: int, **options) -> ProblemPreset:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (known: {', '.join(sorted(PRESETS))})")
    builder = PRESETS[name]
    accepted = inspect.signature(builder).parameters
    for key in options:
        if key not in accepted or key == "seed":
            raise ConfigError(f"preset '{name}' does not take option '{key}'")
    logger.info("building preset %s (seed %d)", name, seed)
    return builder(seed, **options)
