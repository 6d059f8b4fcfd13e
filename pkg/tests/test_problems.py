import math

import numpy as np
import pytest

from laaf.errors import ConfigError, DomainError, ShapeError
from laaf.services.autodiff import Tape
from laaf.services.problems import (
    BURGERS_BOX,
    POISSON_BOX,
    PRESETS,
    ResidualContext,
    build_preset,
    burgers_operator,
    burgers_wave,
    burgers_wave_var,
    circles_dataset,
    collocation_sample,
    discontinuous_target,
    evaluate_residual,
    poisson_inverse_preset,
    poisson_operator,
    poisson_solution_var,
    poisson_source,
)


def test_discontinuous_target_values():
    assert discontinuous_target(0.0) == 0.0
    assert discontinuous_target(-math.pi / 12) == pytest.approx(-0.2, abs=1e-15)
    assert discontinuous_target(1.0) == pytest.approx(1.0 + 0.1 * math.cos(18.0), abs=1e-15)
    assert discontinuous_target(1.0) == pytest.approx(1.0660317, abs=1e-7)
    values = discontinuous_target(np.array([-1.0, 1e-12]))
    assert values[1] > 0.99


def test_poisson_source_at_origin():
    assert poisson_source(0.0, 0.0, 0.7) == pytest.approx(2 * math.pi**2, abs=1e-12)


def test_poisson_exact_solution_has_zero_residual():
    rng = np.random.default_rng(0)
    points = rng.uniform(-0.7, 0.7, size=(50, 2))
    residual = evaluate_residual(poisson_operator(0.7), poisson_solution_var, points, {"alpha": 0.7})
    assert np.max(np.abs(residual)) < 1e-10


def test_poisson_source_matches_autodiff():
    rng = np.random.default_rng(1)
    points = rng.uniform(-0.7, 0.7, size=(100, 2))
    alpha = 0.4
    tape = Tape()
    x, y = tape.lift(points[:, 0].copy()), tape.lift(points[:, 1].copy())
    u = poisson_solution_var(tape, [x, y])
    u_x = tape.derivative_graph(u, x)
    u_xx = tape.derivative_graph(u_x, x)
    u_yy = tape.derivative_graph(tape.derivative_graph(u, y), y)
    by_autodiff = -(alpha * u_x.value + (1.0 + alpha * points[:, 0]) * (u_xx.value + u_yy.value))
    np.testing.assert_allclose(poisson_source(points[:, 0], points[:, 1], alpha), by_autodiff, atol=1e-10)


def test_wrong_alpha_leaves_a_residual():
    points = np.array([[0.3, -0.2], [0.1, 0.5]])
    residual = evaluate_residual(poisson_operator(0.7), poisson_solution_var, points, {"alpha": 0.2})
    assert np.max(np.abs(residual)) > 1e-3


@pytest.mark.parametrize("alpha", [0.0, 0.99, -0.3])
def test_poisson_alpha_range(alpha):
    with pytest.raises(DomainError):
        poisson_inverse_preset(0, alpha_true=alpha)


def test_burgers_exact_solution_has_zero_residual():
    rng = np.random.default_rng(2)
    box = np.asarray(BURGERS_BOX)
    points = rng.uniform(box[:, 0], box[:, 1], size=(50, 2))
    residual = evaluate_residual(burgers_operator(0.05), burgers_wave_var(0.05), points, {"nu": 0.05})
    assert np.max(np.abs(residual)) < 1e-8


def test_burgers_wave_center_and_limits():
    assert burgers_wave(np.array([[0.3, 0.3]]), nu=0.05)[0] == 1.0
    assert burgers_wave(np.array([[-1000.0, 0.0]]), nu=0.05)[0] == pytest.approx(2.0)
    assert burgers_wave(np.array([[1000.0, 0.0]]), nu=0.05)[0] == pytest.approx(0.0, abs=1e-15)


def test_burgers_rejects_bad_states():
    with pytest.raises(DomainError):
        build_preset("burgers_inverse", 0, left_state=0.0, right_state=1.0, n_collocation=10)
    with pytest.raises(DomainError):
        build_preset("burgers_inverse", 0, nu_true=0.0, n_collocation=10)


@pytest.mark.parametrize(
    "operator, solution, inverse",
    [
        (poisson_operator(0.7), poisson_solution_var, {"alpha": 0.7}),
        (burgers_operator(0.05), burgers_wave_var(0.05), {"nu": 0.05}),
    ],
)
def test_residuals_request_exactly_their_declared_orders(operator, solution, inverse):
    tape = Tape()
    inputs = [tape.lift(np.array([0.1, 0.2])), tape.lift(np.array([0.3, 0.4]))]
    u = solution(tape, inputs)
    ctx = ResidualContext(tape, u, inputs, {k: tape.lift(v) for k, v in inverse.items()}, operator.orders)
    operator.builder(ctx)
    assert tuple(ctx.requested) == operator.orders


def test_residual_context_caches_derivatives():
    tape = Tape()
    x = tape.lift(np.array([0.5]))
    ctx = ResidualContext(tape, x.sin(), [x], {}, (2,))
    assert ctx.d(0, 2) is ctx.d(0, 2)
    assert ctx.d(0).value[0] == pytest.approx(math.cos(0.5))
    with pytest.raises(DomainError):
        ctx.d(0, 3)
    with pytest.raises(DomainError):
        ctx.param("alpha")


def test_circles_without_noise():
    x, labels = circles_dataset(n_samples=1000, noise=0.0, factor=0.7, seed=3)
    radius = np.linalg.norm(x, axis=1)
    np.testing.assert_allclose(radius[labels == 1], 0.7, atol=1e-12)
    np.testing.assert_allclose(radius[labels == 0], 1.0, atol=1e-12)
    assert np.all((radius > 0.85) == (labels == 0))
    assert np.sum(labels == 0) == 500
    assert np.sum(labels == 1) == 500


def test_circles_validation_and_determinism():
    with pytest.raises(DomainError):
        circles_dataset(factor=1.2)
    first = circles_dataset(n_samples=50, seed=8)
    again = circles_dataset(n_samples=50, seed=8)
    assert np.array_equal(first[0], again[0])
    assert np.array_equal(first[1], again[1])


def test_collocation_sampling():
    box = [(-1.0, 1.0), (0.0, 0.5)]
    assert np.array_equal(collocation_sample(box, 1, seed=5), collocation_sample(box, 1, seed=5))
    points = collocation_sample(box, 10000, seed=5)
    assert points.shape == (10000, 2)
    assert np.all((points[:, 0] >= -1.0) & (points[:, 0] <= 1.0))
    assert np.all((points[:, 1] >= 0.0) & (points[:, 1] <= 0.5))
    assert abs(points[:, 0].mean()) < 0.02
    assert abs(points[:, 1].mean() - 0.25) < 0.02
    with pytest.raises(DomainError):
        collocation_sample([(1.0, 1.0)], 5, seed=0)
    with pytest.raises(ShapeError):
        collocation_sample(box, 0, seed=0)


def test_preset_data_is_reproducible():
    first = poisson_inverse_preset(4)
    again = poisson_inverse_preset(4)
    assert np.array_equal(first.data_x, again.data_x)
    assert np.array_equal(first.residual_x, again.residual_x)
    other = poisson_inverse_preset(5)
    assert not np.array_equal(first.data_x, other.data_x)


def test_preset_sizes():
    poisson = poisson_inverse_preset(0)
    assert poisson.data_x.shape == (300, 2)
    assert poisson.residual_x.shape == (1000, 2)
    half = 1 / math.sqrt(2)
    assert np.sum(np.isclose(np.max(np.abs(poisson.data_x), axis=1), half)) >= 200
    assert np.all(np.abs(poisson.residual_x) <= POISSON_BOX[0][1])
    assert poisson.inverse[0].name == "alpha"

    burgers = build_preset("burgers_inverse", 0)
    assert burgers.data_x.shape == (300, 2)
    assert burgers.residual_x.shape == (8000, 2)
    assert burgers.widths == (2, 20, 20, 20, 20, 20, 20, 1)

    regression = build_preset("discontinuous", 0)
    assert regression.data_x.shape == (300, 1)
    assert regression.widths == (1, 50, 50, 50, 50, 1)
    assert regression.n == 10.0


def test_noisy_poisson_data():
    clean = poisson_inverse_preset(0)
    noisy = poisson_inverse_preset(0, noise=True)
    difference = noisy.data_u - clean.data_u
    assert np.any(difference != 0)
    # 2.5% of the spread of the clean targets, not of each value
    assert np.std(difference) == pytest.approx(0.025 * np.std(clean.data_u), rel=0.2)


def test_build_preset_rejects_unknown_names_and_options():
    with pytest.raises(ConfigError):
        build_preset("heat", 0)
    with pytest.raises(ConfigError):
        build_preset("discontinuous", 0, alpha_true=0.5)
    assert {"discontinuous", "poisson_inverse", "burgers_inverse", "circles_sigmoid_10"} <= set(PRESETS)
