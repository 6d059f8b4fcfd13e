import numpy as np
import pytest

from laaf.errors import ModeError, ShapeError
from laaf.services.network import (
    ActivationMode,
    FlatParams,
    Nonlinearity,
    ParamKey,
    SlopeMode,
    count_parameters,
    effective_theta,
    evaluate,
    flatten,
    hidden_parameter_count,
    init,
    param_count_ratio,
    param_keys,
    slope_count,
    to_standard,
    unflatten,
    with_values,
)

from .conftest import make_params

ADAPTIVE = [SlopeMode.GAAF, SlopeMode.LLAAF, SlopeMode.NLAAF]


def test_init_sets_slopes_to_one_over_n():
    params = init([1, 50, 50, 50, 50, 1], ActivationMode(SlopeMode.LLAAF, n=10), seed=0)
    assert params.slopes.tolist() == [0.1] * 4
    gaaf = init([1, 5, 1], ActivationMode(SlopeMode.GAAF), seed=0)
    assert gaaf.slopes.tolist() == [1.0]


def test_init_biases_are_zero_and_weights_within_xavier_bound():
    params = init([3, 7, 2], ActivationMode(), seed=4)
    for k, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
        limit = np.sqrt(6.0 / (params.widths[k - 1] + params.widths[k]))
        assert np.all(np.abs(w) <= limit)
        assert not b.any()


def test_init_is_deterministic_in_the_seed():
    mode = ActivationMode(SlopeMode.NLAAF)
    first = flatten(init([2, 4, 4, 1], mode, seed=9)).values
    again = flatten(init([2, 4, 4, 1], mode, seed=9)).values
    other = flatten(init([2, 4, 4, 1], mode, seed=10)).values
    assert np.array_equal(first, again)
    assert not np.array_equal(first, other)


@pytest.mark.parametrize("widths", [[3], [1, 0, 1], []])
def test_init_rejects_bad_widths(widths):
    with pytest.raises(ShapeError):
        init(widths, ActivationMode(), seed=0)


def test_scaling_factor_below_one_is_rejected():
    with pytest.raises(ModeError):
        ActivationMode(SlopeMode.GAAF, n=0.5)


def test_zero_slopes_give_a_constant_network(rng):
    params = make_params([1, 6, 6, 1], SlopeMode.LLAAF, rng=rng)
    params.slopes[:] = 0.0
    out = evaluate(params, rng.uniform(-3, 3, size=(100, 1)))
    assert np.ptp(out) < 1e-15
    assert out[0, 0] == params.biases[-1][0]


def test_unit_slopes_match_fixed_activation(rng):
    fixed = make_params([2, 5, 4, 1], SlopeMode.FIXED, rng=rng)
    adaptive = unflatten(
        FlatParams(
            np.concatenate([flatten(fixed).values, np.ones(2)]),
            fixed.widths,
            ActivationMode(SlopeMode.LLAAF),
        )
    )
    x = rng.normal(size=(20, 2))
    np.testing.assert_allclose(evaluate(adaptive, x), evaluate(fixed, x), atol=1e-15)


def test_single_neuron_closed_form():
    params = init([1, 1, 1], ActivationMode(SlopeMode.GAAF), seed=0)
    params.weights = [np.array([[2.0]]), np.array([[1.0]])]
    params.biases = [np.zeros(1), np.zeros(1)]
    params.slopes = np.array([0.5])
    assert evaluate(params, np.array([[1.0]]))[0, 0] == pytest.approx(np.tanh(1.0), abs=1e-15)


@pytest.mark.parametrize("kind", ADAPTIVE)
def test_initial_slopes_reduce_to_fixed_network(kind):
    mode = ActivationMode(kind, n=10)
    adaptive = init([1, 8, 8, 1], mode, seed=5)
    fixed = init([1, 8, 8, 1], ActivationMode(), seed=5)
    x = np.linspace(-2, 2, 31)[:, None]
    np.testing.assert_allclose(evaluate(adaptive, x), evaluate(fixed, x), atol=1e-15)


def test_slope_and_weight_rescaling_leaves_output_unchanged(rng):
    params = make_params([1, 5, 5, 1], SlopeMode.LLAAF, rng=rng)
    x = rng.uniform(-1, 1, size=(25, 1))
    before = evaluate(params, x)
    c = 2.5
    params.slopes[0] *= c
    params.weights[0] /= c
    params.biases[0] /= c
    np.testing.assert_allclose(evaluate(params, x), before, atol=1e-12)


def test_parameter_counts():
    assert count_parameters([1, 20, 20, 20, 1]) == (840, 61)
    assert hidden_parameter_count([1, 20, 20, 20, 1]) == 40 + 420 + 420
    assert slope_count([1, 20, 20, 20, 1], SlopeMode.NLAAF) == 60
    assert slope_count([1, 20, 20, 20, 1], SlopeMode.LLAAF) == 3
    assert slope_count([1, 20, 20, 20, 1], SlopeMode.GAAF) == 1
    assert slope_count([1, 20, 20, 20, 1], SlopeMode.FIXED) == 0


def test_parameter_count_ratio():
    assert param_count_ratio([1, 20, 20, 20, 1]) == pytest.approx(1.0677, abs=5e-5)
    assert param_count_ratio([1, 1, 1]) == pytest.approx(1.5)
    assert param_count_ratio([1000, 1000, 1]) < 1.002
    with pytest.raises(ShapeError):
        param_count_ratio([3, 1])


def test_parameter_counts_match_an_initialized_network():
    rng = np.random.default_rng(0)
    for _ in range(50):
        widths = [int(w) for w in rng.integers(1, 9, size=rng.integers(3, 6))]
        params = init(widths, ActivationMode(), seed=0)
        omega = sum(w.size for w in params.weights)
        beta = sum(b.size for b in params.biases)
        assert count_parameters(widths) == (omega, beta)
        rho = beta / omega
        assert param_count_ratio(widths) == pytest.approx((1 + 2 * rho) / (1 + rho), rel=1e-15)


@pytest.mark.parametrize("kind", [SlopeMode.FIXED] + ADAPTIVE)
def test_flatten_round_trip(rng, kind):
    params = make_params([2, 3, 2, 1], kind, rng=rng)
    flat = flatten(params)
    restored = unflatten(flat)
    assert np.array_equal(flatten(restored).values, flat.values)
    assert flat.slope_offset == sum(count_parameters(params.widths))
    assert flat.values.size == len(param_keys(params.widths, kind))


def test_each_flat_entry_maps_to_one_structured_entry(rng):
    params = make_params([2, 3, 2, 1], SlopeMode.NLAAF, rng=rng)
    flat = flatten(params)
    for i, key in enumerate(flat.keys):
        values = flat.values.copy()
        values[i] += 1.0
        moved = with_values(params, values)
        diffs = [
            *(np.argwhere(a != b).tolist() for a, b in zip(moved.weights, params.weights)),
            *(np.argwhere(a != b).tolist() for a, b in zip(moved.biases, params.biases)),
            np.argwhere(moved.slopes != params.slopes).tolist(),
        ]
        assert sum(len(d) for d in diffs) == 1
        assert flat.offset(key) == i


def test_flat_layout_orders_slopes_last():
    keys = param_keys((1, 2, 1), SlopeMode.NLAAF)
    assert keys[0] == ParamKey(1, "w", (0, 0))
    assert keys[2] == ParamKey(1, "b", (0,))
    assert keys[-2:] == (ParamKey(1, "a", (0,)), ParamKey(1, "a", (1,)))


def test_flat_length_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        FlatParams(np.zeros(3), (1, 2, 1), ActivationMode())


def test_effective_theta():
    params = init([1, 1, 1], ActivationMode(SlopeMode.GAAF), seed=0)
    params.weights = [np.array([[3.0]]), np.array([[1.5]])]
    params.slopes = np.array([2.0])
    assert effective_theta(params).tolist() == [6.0, 0.0, 1.5, 0.0]

    unit = init([2, 3, 1], ActivationMode(SlopeMode.NLAAF), seed=1)
    np.testing.assert_array_equal(effective_theta(unit), flatten(unit).values[: flatten(unit).slope_offset])

    with pytest.raises(ModeError):
        effective_theta(init([1, 2, 1], ActivationMode(), seed=0))


@pytest.mark.parametrize("kind", ADAPTIVE)
def test_standard_network_computes_the_same_function(rng, kind):
    params = make_params([2, 4, 3, 1], kind, n=10, rng=rng)
    x = rng.normal(size=(15, 2))
    np.testing.assert_allclose(evaluate(to_standard(params), x), evaluate(params, x), atol=1e-12)


def test_forward_rejects_wrong_input_width():
    params = init([2, 3, 1], ActivationMode(), seed=0)
    with pytest.raises(ShapeError):
        evaluate(params, np.zeros((4, 3)))


@pytest.mark.parametrize(
    "base, fn",
    [
        (Nonlinearity.SIGMOID, lambda z: 1.0 / (1.0 + np.exp(-z))),
        (Nonlinearity.RELU, lambda z: np.maximum(z, 0.0)),
        (Nonlinearity.SOFTPLUS, lambda z: np.log1p(np.exp(z))),
        (Nonlinearity.SIN, np.sin),
    ],
)
def test_other_nonlinearities(base, fn):
    params = init([1, 1, 1], ActivationMode(SlopeMode.GAAF, base), seed=0)
    params.weights = [np.array([[0.8]]), np.array([[-1.5]])]
    params.biases = [np.array([0.1]), np.array([0.3])]
    params.slopes = np.array([1.2])
    x = np.array([[-0.7], [0.2], [1.4]])
    expected = -1.5 * fn(1.2 * (0.8 * x + 0.1)) + 0.3
    np.testing.assert_allclose(evaluate(params, x), expected, atol=1e-14)
