import math

import numpy as np
import pytest

from laaf.errors import DomainError, ShapeError, TapeError
from laaf.services.autodiff import Tape, apply, grad_check, total, value_and_grad
from laaf.services.network import ActivationMode, SlopeMode, bind, bind_leaves, flatten, forward, init, with_values


def test_lift_keeps_the_value():
    tape = Tape()
    assert tape.lift(3.0).value == 3.0
    assert len(tape) == 1


def test_lift_rejects_non_finite():
    tape = Tape()
    with pytest.raises(DomainError):
        tape.lift(float("nan"))
    with pytest.raises(DomainError):
        tape.lift(np.array([1.0, np.inf]))


def test_adding_zero_is_identity():
    tape = Tape()
    x = tape.lift(0.7)
    assert (x + 0.0).value == 0.7


@pytest.mark.parametrize(
    "kind, expected",
    [("tanh", 0.0), ("sigmoid", 0.5), ("softplus", math.log(2.0)), ("relu", 0.0), ("sin", 0.0), ("cos", 1.0)],
)
def test_primitives_at_zero(kind, expected):
    tape = Tape()
    assert apply(kind, tape.lift(0.0)).value == pytest.approx(expected, abs=1e-15)


def test_operands_from_another_tape_are_rejected():
    first, second = Tape(), Tape()
    with pytest.raises(TapeError):
        first.lift(1.0) + second.lift(2.0)


def test_unknown_primitive_is_rejected():
    tape = Tape()
    with pytest.raises(TapeError):
        tape.apply("erf", tape.lift(1.0))


def test_domain_errors():
    tape = Tape()
    with pytest.raises(DomainError):
        tape.lift(1.0) / tape.lift(0.0)
    with pytest.raises(DomainError):
        tape.lift(0.0).log()
    with pytest.raises(DomainError):
        tape.lift(1000.0).exp()


def test_backward_simple_rules():
    tape = Tape()
    x = tape.lift(0.0)
    assert tape.backward(x.tanh())[x.index] == 1.0
    tape = Tape()
    x = tape.lift(3.0)
    assert tape.backward(x * x)[x.index] == 6.0


def test_unrelated_leaf_gets_zero_adjoint():
    tape = Tape()
    x = tape.lift(2.0)
    c = tape.lift(5.0)
    grads = tape.backward(c.exp())
    assert grads[x.index] == 0.0


def _composite(tape, xs):
    x, y = xs
    numerator = (x.sin() * y + (x * y).tanh()).exp()
    return numerator / (1.0 + y.abs_sq())


def test_composite_expression_matches_central_differences():
    assert grad_check(_composite, [0.3, -0.7]) < 1e-6


@pytest.mark.parametrize(
    "kind", ["sin", "cos", "exp", "log", "tanh", "sigmoid", "relu", "softplus", "abs_sq", "neg"]
)
def test_unary_primitive_gradients(kind):
    rng = np.random.default_rng(7)
    magnitudes = rng.uniform(0.1, 2.0, size=100)
    signs = np.ones(100) if kind == "log" else rng.choice([-1.0, 1.0], size=100)
    for point in magnitudes * signs:
        assert grad_check(lambda tape, xs: apply(kind, xs[0]), [point]) < 1e-6


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_primitive_gradients(kind):
    rng = np.random.default_rng(11)
    for _ in range(100):
        point = rng.uniform(0.1, 2.0, size=2) * rng.choice([-1.0, 1.0], size=2)
        assert grad_check(lambda tape, xs: apply(kind, xs[0], xs[1]), point) < 1e-6


def test_integer_power_gradient():
    assert grad_check(lambda tape, xs: xs[0] ** 3, [1.7]) < 1e-6
    assert grad_check(lambda tape, xs: xs[0] ** -2, [0.9]) < 1e-6


def test_gradient_is_linear():
    point = [0.4, 1.1]

    def f(tape, xs):
        return xs[0].sin() * xs[1]

    def g(tape, xs):
        return (xs[0] * xs[1]).exp()

    def combined(tape, xs):
        return 2.0 * f(tape, xs) + 3.0 * g(tape, xs)

    _, grad_f = value_and_grad(f, point)
    _, grad_g = value_and_grad(g, point)
    _, grad_combined = value_and_grad(combined, point)
    np.testing.assert_allclose(grad_combined, 2.0 * grad_f + 3.0 * grad_g, atol=1e-12)


def test_grad_check_on_simple_functions():
    assert grad_check(lambda tape, xs: xs[0] * xs[0], [1.0]) < 1e-8
    assert grad_check(lambda tape, xs: tape.lift(5.0), [0.3]) == 0.0


def test_grad_check_rejects_bad_step_and_domain():
    with pytest.raises(DomainError):
        grad_check(lambda tape, xs: xs[0] * xs[0], [1.0], step=0.0)
    with pytest.raises(DomainError):
        grad_check(lambda tape, xs: xs[0].log(), [1e-7])


def test_derivative_graph_first_and_second_order():
    tape = Tape()
    x = tape.lift(0.0)
    assert tape.derivative_graph(x.tanh(), x).value == 1.0

    tape = Tape()
    x = tape.lift(2.0)
    first = tape.derivative_graph(x ** 3, x)
    assert first.value == pytest.approx(12.0)
    assert tape.derivative_graph(first, x).value == pytest.approx(12.0)


def test_second_derivative_of_polynomial():
    tape = Tape()
    x = tape.lift(1.3)
    p = x ** 4 - 3.0 * x.abs_sq() + 2.0 * x
    second = tape.derivative_graph(tape.derivative_graph(p, x), x)
    assert second.value == pytest.approx(12.0 * 1.3 ** 2 - 6.0, abs=1e-10)


def test_relu_derivative_at_zero_is_zero():
    tape = Tape()
    x = tape.lift(0.0)
    y = x.relu()
    assert tape.backward(y)[x.index] == 0.0
    assert tape.derivative_graph(y, x).value == 0.0


def test_derivative_graph_wrt_non_leaf_is_rejected():
    tape = Tape()
    x = tape.lift(1.0)
    y = x * 2.0
    with pytest.raises(TapeError):
        tape.derivative_graph(y * y, y)


def test_lanes():
    tape = Tape()
    x = tape.lift(np.array([1.0, 2.0, 3.0]))
    w = tape.lift(0.5)
    grads = tape.backward((w * x.abs_sq()).sum())
    np.testing.assert_allclose(grads[x.index], [1.0, 2.0, 3.0])
    assert grads[w.index] == pytest.approx(14.0)

    dsin = tape.derivative_graph(x.sin(), x)
    np.testing.assert_allclose(dsin.value, np.cos([1.0, 2.0, 3.0]), atol=1e-15)


def test_total_sums_left_to_right():
    tape = Tape()
    terms = [tape.lift(v) for v in (1.0, 2.0, 3.5)]
    assert total(terms).value == 6.5


def test_parameter_gradient_of_second_input_derivative():
    params = init([1, 3, 1], ActivationMode(SlopeMode.FIXED), seed=3)
    params.biases[0][:] = [0.1, -0.2, 0.3]
    template = params

    def u_xx(tape, xs):
        local = with_values(template, np.zeros(len(xs)))
        bound = bind_leaves(local, xs)
        x = tape.lift(0.4)
        u = forward(local, [x], tape, bound)[0]
        return tape.derivative_graph(tape.derivative_graph(u, x), x)

    theta = flatten(params).values
    assert grad_check(u_xx, theta, step=1e-5) < 1e-5


def test_affine_value_and_adjoints():
    tape = Tape()
    b = tape.lift(0.5)
    w = [tape.lift(2.0), tape.lift(-1.0)]
    x = tape.lift(np.array([1.0, 2.0, 3.0]))
    y = tape.lift(4.0)
    out = tape.affine(b, w, [x, y])
    np.testing.assert_allclose(out.value, [0.5 + 2.0 * v - 4.0 for v in (1.0, 2.0, 3.0)])

    grads = tape.backward(out.sum())
    assert grads[b.index] == 3.0
    assert grads[w[0].index] == 6.0
    assert grads[w[1].index] == 12.0
    np.testing.assert_allclose(grads[x.index], [2.0, 2.0, 2.0])
    assert grads[y.index] == -3.0


def test_affine_rejects_mismatched_groups():
    tape = Tape()
    a, b = tape.lift(1.0), tape.lift(2.0)
    with pytest.raises(ShapeError):
        tape.affine(a, [a, b], [b])
    with pytest.raises(ShapeError):
        tape.affine(a, [tape.lift(np.ones(2))], [tape.lift(np.ones(3))])
    assert apply("affine", a, a, b).value == 3.0


def test_affine_gradient_matches_finite_differences():
    def f(tape, xs):
        inner = tape.affine(xs[0], xs[1:3], [xs[3].tanh(), xs[3] * xs[4]])
        return tape.affine(inner, [inner, xs[4]], [inner.sin(), xs[1]])

    assert grad_check(f, [0.3, -0.7, 1.1, 0.4, -0.2]) < 1e-5


def test_derivative_graph_through_affine():
    tape = Tape()
    x = tape.lift(np.array([0.5, -1.0]))
    w1, w2 = tape.lift(3.0), tape.lift(0.25)
    out = tape.affine(tape.lift(1.0), [w1, w2], [x, x * x])
    dx = tape.derivative_graph(out, x)
    np.testing.assert_allclose(dx.value, 3.0 + 0.5 * np.array([0.5, -1.0]))
    assert tape.derivative_graph(dx, x).value == pytest.approx(0.5)


def test_gradient_is_for_scalar_leaves():
    tape = Tape()
    x = tape.lift(np.array([1.0, 2.0]))
    w = tape.lift(3.0)
    out = (w * x).sum()
    np.testing.assert_allclose(tape.gradient(out, [w]), [3.0])
    with pytest.raises(ShapeError):
        tape.gradient(out, [x])


def test_lift_many():
    tape = Tape()
    xs = tape.lift_many(np.array([1.0, -2.0]))
    assert [x.value for x in xs] == [1.0, -2.0]
    assert len(tape) == 2
    with pytest.raises(DomainError):
        tape.lift_many([0.0, np.nan])


def test_forward_costs_a_few_nodes_per_neuron():
    params = init([1, 50, 50, 50, 50, 1], ActivationMode(SlopeMode.LLAAF), seed=0)
    tape = Tape()
    x = tape.lift(np.linspace(-1.0, 1.0, 300))
    bound = bind(params, tape)
    assert len(tape) == 1 + flatten(params).values.size

    u = forward(params, [x], tape, bound)[0]
    assert u.value.shape == (300,)
    # affine, slope product and activation per hidden neuron; one affine for the output
    assert sum(node.kind != "leaf" for node in tape.nodes) == 3 * 200 + 1

    grown = len(tape)
    tape.derivative_graph(u, x)
    assert len(tape) - grown <= 8 * 200

    grad = tape.gradient(u.mean(), bound.leaves)
    assert grad.shape == (len(bound.leaves),)
    assert np.all(np.isfinite(grad))
