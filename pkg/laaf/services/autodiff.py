# laaf/services/autodiff.py
"""Reverse-mode automatic differentiation over a scalar expression tape.

A Tape is an append-only list of Nodes in topological order. Every node holds
its primal value, which is either a float64 scalar or a float64 array of
"lanes": the same scalar expression evaluated at many sample points at once.
Primitives are elementwise; `sum` and `mean` collapse lanes to a scalar.

One primitive is n-ary: `affine` computes ``b + sum_i l_i * r_i`` as a single
node, so a neuron's pre-activation costs one node however wide the layer is.
The operand groups are stacked once per tape and reused by every node that
shares them, which is what keeps both sweeps below cheap for dense layers.

Two ways to differentiate:

* `backward` / `gradient` sweep the tape once and return numeric adjoints.
* `derivative_graph` emits new primitive nodes that compute d(output)/d(wrt),
  so the result is an ordinary Var that can be differentiated again. PDE
  residuals use it for u_x, u_xx, u_t and then `gradient` for the parameters.

Example:
    tape = Tape()
    x = tape.lift(3.0)
    y = x * x
    tape.backward(y)[x.index]                    # 6.0
    tape.derivative_graph(y, x).value            # 6.0
"""
from __future__ import annotations

import bisect
import heapq
import logging
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np

from ..errors import DomainError, ShapeError, TapeError

logger = logging.getLogger(__name__)

Value = Union[float, np.ndarray]

LEAF = "leaf"
AFFINE = "affine"
BINARY_KINDS = frozenset({"add", "sub", "mul", "div"})
UNARY_KINDS = frozenset(
    {
        "neg", "sin", "cos", "exp", "log", "tanh", "sigmoid", "relu", "softplus",
        "pow_int", "abs_sq", "sum", "mean", "step",
    }
)
KINDS = BINARY_KINDS | UNARY_KINDS | {AFFINE}


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


_FORWARD: dict[str, Callable] = {
    "add": lambda x, y: x + y,
    "sub": lambda x, y: x - y,
    "mul": lambda x, y: x * y,
    "div": lambda x, y: x / y,
    "neg": lambda x: -x,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "relu": lambda x: np.maximum(x, 0.0),
    "softplus": lambda x: np.logaddexp(0.0, x),
    "abs_sq": lambda x: x * x,
    "sum": lambda x: float(np.sum(x)),
    "mean": lambda x: float(np.mean(x)),
    # Heaviside with step(0) = 0; used as the ReLU derivative.
    "step": lambda x: (x > 0) * 1.0,
}


def _as_value(value) -> Value:
    if isinstance(value, np.ndarray):
        if value.ndim == 0:
            return float(value)
        if value.ndim != 1:
            raise ShapeError(f"lane values must be 1-D, got shape {value.shape}")
        return value.astype(np.float64, copy=False)
    return float(value)


class Node(NamedTuple):
    kind: str
    operands: tuple[int, ...]
    value: Value
    # pow_int: the integer power; affine: the number of products
    exponent: int = 0


class Var:
    """Handle to one node of one tape."""

    __slots__ = ("tape", "index")

    # numpy scalars on the left defer to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Value:
        return self.tape.nodes[self.index].value

    def _other(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.lift(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._other(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._other(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._other(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._other(other), self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, self._other(other))

    def __rmul__(self, other):
        return self.tape.apply("mul", self._other(other), self)

    def __truediv__(self, other):
        return self.tape.apply("div", self, self._other(other))

    def __rtruediv__(self, other):
        return self.tape.apply("div", self._other(other), self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __pow__(self, exponent: int):
        return self.tape.apply("pow_int", self, exponent=exponent)

    def sin(self):
        return self.tape.apply("sin", self)

    def cos(self):
        return self.tape.apply("cos", self)

    def exp(self):
        return self.tape.apply("exp", self)

    def log(self):
        return self.tape.apply("log", self)

    def tanh(self):
        return self.tape.apply("tanh", self)

    def sigmoid(self):
        return self.tape.apply("sigmoid", self)

    def relu(self):
        return self.tape.apply("relu", self)

    def softplus(self):
        return self.tape.apply("softplus", self)

    def abs_sq(self):
        return self.tape.apply("abs_sq", self)

    def sum(self):
        return self.tape.apply("sum", self)

    def mean(self):
        return self.tape.apply("mean", self)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, value={self.value!r})"


class _Group(NamedTuple):
    """Stacked primal values of one operand group of an affine node."""

    indices: np.ndarray
    values: np.ndarray          # (m,) when every operand is scalar, else (m, lanes)
    lane_mask: np.ndarray       # which operands are lane-valued
    unique: bool


def _contract(left: np.ndarray, right: np.ndarray) -> Value:
    if left.ndim == 1 and right.ndim == 1:
        return float(left @ right)
    if left.ndim == 1:
        return left @ right
    if right.ndim == 1:
        return right @ left
    if left.shape != right.shape:
        raise ShapeError(f"'affine' lane counts differ: {left.shape} vs {right.shape}")
    return np.einsum("ij,ij->j", left, right)


def _group_adjoint(partner: np.ndarray, g: Value, reduce: bool) -> np.ndarray:
    """d(output)/d(operand_i) * g for every operand of the other group.

    With `reduce` the lanes are summed, giving one number per operand.
    """
    lanes = np.ndim(g) > 0
    if reduce:
        if not lanes:
            return partner * g if partner.ndim == 1 else partner.sum(axis=1) * g
        return partner * float(np.sum(g)) if partner.ndim == 1 else partner @ g
    if partner.ndim == 1:
        return np.multiply.outer(partner, g)
    return partner * g


class _Pair(NamedTuple):
    """Adjoint contribution coefficient * g, kept apart so pairs can share one affine node."""

    coefficient: "Var"
    g: "Var"


class _Adjoint:
    __slots__ = ("terms", "pairs")

    def __init__(self):
        self.terms: list = []
        self.pairs: list[_Pair] = []


class Tape:
    """Append-only computation record. Single owner; build a fresh one per evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._ops: list[int] = []
        self._groups: dict[tuple[int, ...], _Group] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node) -> Var:
        index = len(self.nodes)
        self.nodes.append(node)
        if node.kind != LEAF:
            self._ops.append(index)
        return Var(self, index)

    def _check(self, var: Var) -> None:
        if not isinstance(var, Var) or var.tape is not self:
            raise TapeError("Var belongs to a different tape")

    def lift(self, value) -> Var:
        value = _as_value(value)
        if not np.all(np.isfinite(value)):
            raise DomainError(f"cannot lift non-finite value {value!r}")
        return self._push(Node(LEAF, (), value))

    def lift_many(self, values) -> list[Var]:
        """One scalar leaf per entry of a 1-D array, in order."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError(f"lift_many expects a 1-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("cannot lift non-finite values")
        start = len(self.nodes)
        self.nodes.extend(Node(LEAF, (), v) for v in values.tolist())
        return [Var(self, i) for i in range(start, len(self.nodes))]

    def apply(self, kind: str, *operands: Var, exponent: int | None = None) -> Var:
        if kind == AFFINE:
            if len(operands) < 3 or len(operands) % 2 == 0:
                raise TapeError(f"'affine' takes a bias and two equal groups, got {len(operands)} operand(s)")
            m = (len(operands) - 1) // 2
            return self.affine(operands[0], operands[1:1 + m], operands[1 + m:])
        if kind not in KINDS:
            raise TapeError(f"unsupported primitive '{kind}'")
        arity = 2 if kind in BINARY_KINDS else 1
        if len(operands) != arity:
            raise TapeError(f"'{kind}' takes {arity} operand(s), got {len(operands)}")
        for var in operands:
            self._check(var)
        args = [self.nodes[var.index].value for var in operands]

        if kind == "div" and np.any(args[1] == 0):
            raise DomainError("division by zero primal")
        if kind == "log" and np.any(args[0] <= 0):
            raise DomainError("log of non-positive primal")
        if kind == "pow_int":
            if exponent is None or int(exponent) != exponent:
                raise DomainError("pow_int needs an integer exponent")
            exponent = int(exponent)
            if exponent < 0 and np.any(args[0] == 0):
                raise DomainError("negative power of zero")
            value = args[0] ** exponent
        else:
            try:
                value = _FORWARD[kind](*args)
            except ValueError as ex:
                raise ShapeError(f"'{kind}' operands do not broadcast: {ex}") from ex
        if kind in ("exp", "pow_int", "mul", "div") and not np.all(np.isfinite(value)):
            raise DomainError(f"'{kind}' overflowed to a non-finite value")
        node = Node(kind, tuple(var.index for var in operands), _as_value(value), exponent or 0)
        return self._push(node)

    def affine(self, bias: Var, left: Sequence[Var], right: Sequence[Var]) -> Var:
        """One node holding ``bias + sum_i left[i] * right[i]``."""
        if len(left) != len(right):
            raise ShapeError(f"'affine' groups differ in length: {len(left)} vs {len(right)}")
        if not left:
            raise ShapeError("'affine' needs at least one product")
        self._check(bias)
        for var in left:
            self._check(var)
        for var in right:
            self._check(var)
        left_key = tuple(var.index for var in left)
        right_key = tuple(var.index for var in right)
        left_values, right_values = self._group(left_key).values, self._group(right_key).values
        try:
            value = _contract(left_values, right_values) + self.nodes[bias.index].value
        except ValueError as ex:
            raise ShapeError(f"'affine' operands do not broadcast: {ex}") from ex
        if not np.all(np.isfinite(value)):
            raise DomainError("'affine' overflowed to a non-finite value")
        node = Node(AFFINE, (bias.index, *left_key, *right_key), _as_value(value), len(left_key))
        return self._push(node)

    def _group(self, key: tuple[int, ...]) -> _Group:
        group = self._groups.get(key)
        if group is not None:
            return group
        values = [self.nodes[i].value for i in key]
        lane_mask = np.array([isinstance(v, np.ndarray) for v in values])
        if lane_mask.any():
            sizes = {v.size for v in values if isinstance(v, np.ndarray)}
            if len(sizes) != 1:
                raise ShapeError(f"'affine' operands have different lane counts {sorted(sizes)}")
            n = sizes.pop()
            stacked = np.stack([np.broadcast_to(v, (n,)) for v in values])
        else:
            stacked = np.array(values, dtype=np.float64)
        group = _Group(np.array(key, dtype=np.intp), stacked, lane_mask, len(set(key)) == len(key))
        self._groups[key] = group
        return group

    # -- reverse sweep -------------------------------------------------

    def backward(self, output: Var) -> dict[int, Value]:
        """Numeric adjoints d(output)/d(leaf) for every leaf on the tape.

        A lane-valued output is seeded with ones, i.e. the gradient of its lane sum.
        """
        scalar, lanes = self._sweep(output)
        result: dict[int, Value] = {}
        for i, node in enumerate(self.nodes):
            if node.kind != LEAF:
                continue
            if isinstance(node.value, np.ndarray):
                result[i] = lanes.get(i, np.zeros_like(node.value))
            else:
                result[i] = float(scalar[i]) if i < scalar.size else 0.0
        return result

    def gradient(self, output: Var, leaves: Sequence[Var]) -> np.ndarray:
        """Adjoints of scalar-valued `leaves` as one float64 array."""
        for var in leaves:
            self._check(var)
            if isinstance(self.nodes[var.index].value, np.ndarray):
                raise ShapeError("gradient covers scalar-valued Vars only; use backward for lanes")
        scalar, _ = self._sweep(output)
        index = np.array([var.index for var in leaves], dtype=np.intp)
        grad = np.zeros(index.size)
        inside = index < scalar.size
        grad[inside] = scalar[index[inside]]
        return grad

    def _sweep(self, output: Var) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        self._check(output)
        nodes = self.nodes
        o = output.index
        scalar = np.zeros(o + 1)
        lanes: dict[int, np.ndarray] = {}
        # lane adjoints of affine operand groups, flushed before any member is visited
        pending: dict[tuple[int, ...], np.ndarray] = {}
        due: list[tuple[int, tuple[int, ...]]] = []

        def accumulate(j: int, c) -> None:
            value = nodes[j].value
            if isinstance(value, np.ndarray):
                if j in lanes:
                    lanes[j] = lanes[j] + c
                else:
                    lanes[j] = c if np.ndim(c) else np.full_like(value, c)
            else:
                scalar[j] += c if not np.ndim(c) else float(np.sum(c))

        def flush(key: tuple[int, ...]) -> None:
            block = pending.pop(key)
            for row, j in zip(block, key):
                accumulate(j, row)

        def spread(key: tuple[int, ...], group: _Group, partner: _Group, g) -> None:
            if not group.lane_mask.any():
                contribution = _group_adjoint(partner.values, g, reduce=True)
                if group.unique:
                    scalar[group.indices] += contribution
                else:
                    np.add.at(scalar, group.indices, contribution)
                return
            contribution = _group_adjoint(partner.values, g, reduce=False)
            if key in pending:
                pending[key] = pending[key] + contribution
            else:
                pending[key] = contribution
                heapq.heappush(due, (-max(key), key))

        out_value = nodes[o].value
        if isinstance(out_value, np.ndarray):
            lanes[o] = np.ones_like(out_value)
        else:
            scalar[o] = 1.0

        stop = bisect.bisect_right(self._ops, o)
        for i in reversed(self._ops[:stop]):
            while due and -due[0][0] >= i:
                flush(heapq.heappop(due)[1])
            node = nodes[i]
            if isinstance(node.value, np.ndarray):
                g = lanes.pop(i, None)
                if g is None:
                    continue
            else:
                g = scalar[i]
                if g == 0.0:
                    continue
                g = float(g)
            if node.kind == AFFINE:
                m = node.exponent
                left_key, right_key = node.operands[1:1 + m], node.operands[1 + m:]
                left, right = self._groups[left_key], self._groups[right_key]
                accumulate(node.operands[0], g)
                spread(left_key, left, right, g)
                spread(right_key, right, left, g)
                continue
            for j, contribution in zip(node.operands, self._numeric_partials(node, g)):
                if contribution is not None:
                    accumulate(j, contribution)
        while due:
            flush(heapq.heappop(due)[1])
        return scalar, lanes

    def _numeric_partials(self, node: Node, g):
        kind = node.kind
        nodes = self.nodes
        x = nodes[node.operands[0]].value
        out = node.value
        if kind == "add":
            return g, g
        if kind == "sub":
            return g, -g
        if kind == "mul":
            y = nodes[node.operands[1]].value
            return g * y, g * x
        if kind == "div":
            y = nodes[node.operands[1]].value
            return g / y, -g * out / y
        if kind == "neg":
            return (-g,)
        if kind == "sin":
            return (g * np.cos(x),)
        if kind == "cos":
            return (-g * np.sin(x),)
        if kind == "exp":
            return (g * out,)
        if kind == "log":
            return (g / x,)
        if kind == "tanh":
            return (g * (1.0 - out * out),)
        if kind == "sigmoid":
            return (g * out * (1.0 - out),)
        if kind == "relu":
            return (g * ((x > 0) * 1.0),)
        if kind == "softplus":
            return (g * _sigmoid(x),)
        if kind == "pow_int":
            k = node.exponent
            return (g * k * x ** (k - 1) if k != 0 else None,)
        if kind == "abs_sq":
            return (g * 2.0 * x,)
        if kind == "sum":
            return (g * np.ones_like(x) if np.ndim(x) else g,)
        if kind == "mean":
            return (g * np.full_like(x, 1.0 / np.size(x)) if np.ndim(x) else g,)
        if kind == "step":
            return (None,)
        raise TapeError(f"no derivative rule for '{kind}'")

    # -- derivative graphs ---------------------------------------------

    def derivative_graph(self, output: Var, wrt: Var) -> Var:
        """Emit nodes computing d(output)/d(wrt) and return them as a Var.

        Only nodes that depend on `wrt` are differentiated. For a lane output the
        result holds the per-lane derivative; a constant result may be a scalar
        that broadcasts against `wrt`. Contributions reaching one node through
        products are gathered into a single affine node.
        """
        self._check(output)
        self._check(wrt)
        nodes = self.nodes
        if nodes[wrt.index].kind != LEAF:
            raise TapeError("derivative_graph differentiates with respect to leaves only")
        o, w = output.index, wrt.index
        if o == w:
            return self.lift(1.0)
        if w > o:
            return self.lift(0.0)

        depends = [False] * (o - w + 1)
        depends[0] = True
        for i in range(w + 1, o + 1):
            for j in nodes[i].operands:
                if j >= w and depends[j - w]:
                    depends[i - w] = True
                    break
        if not depends[o - w]:
            return self.lift(0.0)

        # None stands for a unit adjoint so the seed costs no nodes.
        seed = _Adjoint()
        seed.terms.append(None)
        adjoints: dict[int, _Adjoint] = {o: seed}
        for i in range(o, w, -1):
            entry = adjoints.pop(i, None)
            if entry is None:
                continue
            node = nodes[i]
            if node.kind == LEAF:
                continue
            g = self._materialize(entry, i)
            wanted = tuple(j >= w and depends[j - w] for j in node.operands)
            for j, want, contribution in zip(node.operands, wanted, self._symbolic_partials(node, i, g, wanted)):
                if not want or contribution is _ZERO:
                    continue
                target = adjoints.get(j)
                if target is None:
                    target = adjoints[j] = _Adjoint()
                if isinstance(contribution, _Pair):
                    target.pairs.append(contribution)
                else:
                    target.terms.append(contribution)
        if w not in adjoints:
            return self.lift(0.0)
        return self._unit(self._materialize(adjoints[w], w))

    def _materialize(self, entry: _Adjoint, index: int) -> Var | None:
        terms, pairs = entry.terms, entry.pairs
        if not pairs and len(terms) == 1:
            result = terms[0]
        elif not pairs:
            result = total([self._unit(t) for t in terms])
        elif not terms and len(pairs) == 1:
            result = pairs[0].coefficient * pairs[0].g
        else:
            bias = total([self._unit(t) for t in terms]) if terms else self.lift(0.0)
            result = self.affine(bias, [p.coefficient for p in pairs], [p.g for p in pairs])
        if (
            result is not None
            and not isinstance(self.nodes[index].value, np.ndarray)
            and isinstance(result.value, np.ndarray)
        ):
            result = result.sum()
        return result

    def _unit(self, g: Var | None) -> Var:
        return self.lift(1.0) if g is None else g

    def _symbolic_partials(self, node: Node, index: int, g: Var | None, wanted: tuple[bool, ...]):
        kind = node.kind
        out = Var(self, index)
        x = Var(self, node.operands[0])

        def times(v: Var) -> Var:
            return v if g is None else g * v

        def paired(v: Var):
            return v if g is None else _Pair(v, g)

        def negated() -> Var:
            return self.lift(-1.0) if g is None else -g

        if kind == AFFINE:
            m = node.exponent
            operands = node.operands
            partials = [g]
            for k in range(1, 1 + m):
                partials.append(paired(Var(self, operands[k + m])) if wanted[k] else _ZERO)
            for k in range(1 + m, 1 + 2 * m):
                partials.append(paired(Var(self, operands[k - m])) if wanted[k] else _ZERO)
            return partials
        if kind == "add":
            return g, g
        if kind == "sub":
            return g, (negated() if wanted[1] else _ZERO)
        if kind == "mul":
            y = Var(self, node.operands[1])
            return (paired(y) if wanted[0] else _ZERO), (paired(x) if wanted[1] else _ZERO)
        if kind == "div":
            y = Var(self, node.operands[1])
            dx = (self._unit(g) / y) if wanted[0] else _ZERO
            dy = (-(times(out) / y)) if wanted[1] else _ZERO
            return dx, dy
        if kind == "neg":
            return (negated(),)
        if kind == "sin":
            return (times(x.cos()),)
        if kind == "cos":
            return (-times(x.sin()),)
        if kind == "exp":
            return (times(out),)
        if kind == "log":
            return (self._unit(g) / x,)
        if kind == "tanh":
            return (times(1.0 - out.abs_sq()),)
        if kind == "sigmoid":
            return (times(out * (1.0 - out)),)
        if kind == "relu":
            return (times(self.apply("step", x)),)
        if kind == "softplus":
            return (times(x.sigmoid()),)
        if kind == "pow_int":
            k = node.exponent
            if k == 0:
                return (_ZERO,)
            if k == 1:
                return (g,)
            factor = x if k == 2 else self.apply("pow_int", x, exponent=k - 1)
            return (times(float(k) * factor),)
        if kind == "abs_sq":
            return (times(2.0 * x),)
        if kind == "sum":
            return (g,)
        if kind == "mean":
            return (times(self.lift(1.0 / np.size(x.value))),)
        if kind == "step":
            return (_ZERO,)
        raise TapeError(f"no derivative rule for '{kind}'")

# Marker for an adjoint contribution that is identically zero.
_ZERO = object()


def lift(tape: Tape, value) -> Var:
    return tape.lift(value)


def apply(kind: str, *operands: Var, exponent: int | None = None) -> Var:
    if not operands:
        raise TapeError(f"'{kind}' needs at least one operand")
    return operands[0].tape.apply(kind, *operands, exponent=exponent)


def backward(tape: Tape, output: Var) -> dict[int, Value]:
    return tape.backward(output)


def derivative_graph(tape: Tape, output: Var, wrt: Var) -> Var:
    return tape.derivative_graph(output, wrt)


def total(terms: Sequence[Var]) -> Var:
    """Left-to-right sum of Vars on one tape."""
    if not terms:
        raise ShapeError("cannot sum an empty sequence")
    acc = terms[0]
    for term in terms[1:]:
        acc = acc + term
    return acc


ScalarFunction = Callable[[Tape, list[Var]], Var]


def value_and_grad(f: ScalarFunction, point: Sequence[float]) -> tuple[float, np.ndarray]:
    tape = Tape()
    xs = tape.lift_many(point)
    out = f(tape, xs)
    if np.ndim(out.value) != 0:
        raise ShapeError("function must return a scalar Var")
    return float(out.value), tape.gradient(out, xs)


def function_value(f: ScalarFunction, point: np.ndarray) -> float:
    tape = Tape()
    value = float(f(tape, [tape.lift(float(p)) for p in point]).value)
    if not np.isfinite(value):
        raise DomainError(f"non-finite function value at {point!r}")
    return value


def grad_check(f: ScalarFunction, point: Sequence[float], step: float = 1e-6) -> float:
    """Max over coordinates of |AD - central difference| / (|central difference| + 1e-12)."""
    if step <= 0:
        raise DomainError("finite-difference step must be positive")
    point = np.asarray(point, dtype=np.float64)
    value, ad = value_and_grad(f, point)
    if not np.isfinite(value):
        raise DomainError("non-finite function value at the check point")
    worst = 0.0
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] = point[i] + step
        plus = function_value(f, shifted)
        shifted[i] = point[i] - step
        minus = function_value(f, shifted)
        central = (plus - minus) / (2.0 * step)
        worst = max(worst, abs(ad[i] - central) / (abs(central) + 1e-12))
    logger.debug("grad_check over %d coordinates: max relative error %.3e", point.size, worst)
    return worst
