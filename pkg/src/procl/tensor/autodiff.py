"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operation appends a node to a :class:`Tape`. A node's parents always sit
at lower indices, so the tape is its own topological order and ``backward``
is a single reverse sweep. A recorded tape doubles as a static graph:
:func:`forward_eval` replays it with new input values.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels


class TensorError(Exception):
    """Base class for tensor-core errors."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    def __init__(self, message, node=None, op=None, scope=None):
        super().__init__(message)
        self.node = node
        self.op = op
        self.scope = scope


@dataclass
class Op:
    forward: Callable
    vjp: Callable  # (g, out, *parent_values, **attrs) -> one gradient per parent
    # vjp accepts needs=(bool per parent) and may return None where False
    selective: bool = False


OPS: dict[str, Op] = {}


def _register(name, forward, vjp, selective=False):
    OPS[name] = Op(forward, vjp, selective)


@dataclass
class Node:
    op: str  # "param", "input", "const" or a key of OPS
    parents: tuple
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    scope: str | None = None


class Tape:
    """Append-only record of a computation."""

    def __init__(self, checked=True):
        self.nodes: list[Node] = []
        self.checked = checked
        self.outputs: dict[str, int] = {}
        self._named: dict[str, int] = {}
        self._scope: str | None = None

    def __len__(self):
        return len(self.nodes)

    @contextlib.contextmanager
    def scope(self, label):
        prev, self._scope = self._scope, label
        try:
            yield
        finally:
            self._scope = prev

    def _push(self, op, parents, value, attrs=None, name=None):
        value = np.asarray(value, dtype=np.float64)
        idx = len(self.nodes)
        for p in parents:
            if p >= idx:  # pragma: no cover - construction guarantees this
                raise TensorError("parent index must precede node")
        if self.checked and not np.all(np.isfinite(value)):
            where = f" in {self._scope!r}" if self._scope else ""
            raise NonFiniteError(
                f"non-finite value at node {idx} (op {op}){where}", node=idx, op=op, scope=self._scope
            )
        self.nodes.append(Node(op, tuple(parents), value, attrs or {}, name, self._scope))
        return Var(self, idx)

    def _leaf(self, kind, name, value):
        if name in self._named:
            node = self.nodes[self._named[name]]
            if node.op != kind:
                raise TensorError(f"name {name!r} already bound as {node.op}")
            return Var(self, self._named[name])
        var = self._push(kind, (), np.array(value, dtype=np.float64, copy=True), name=name)
        self._named[name] = var.index
        return var

    def param(self, name, value) -> "Var":
        """Trainable leaf; repeated calls with the same name share one node."""
        return self._leaf("param", name, value)

    def input(self, name, value) -> "Var":
        return self._leaf("input", name, value)

    def const(self, value) -> "Var":
        return self._push("const", (), np.array(value, dtype=np.float64, copy=True))

    def mark_output(self, name, var):
        self.outputs[name] = var.index

    def apply(self, op, *parents, **attrs):
        vals = [self.nodes[p.index].value for p in parents]
        try:
            with np.errstate(all="ignore"):  # non-finite results are reported by _push
                out = OPS[op].forward(*vals, **attrs)
        except ValueError as exc:
            raise ShapeError(f"node {len(self.nodes)} (op {op}): {exc}") from None
        return self._push(op, [p.index for p in parents], out, attrs)

    def lift(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise TensorError("mixing variables from different tapes")
            return x
        return self.const(x)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # ndarray <op> Var defers to the reflected Var method

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index}, op={node.op}, shape={self.shape})"

    def _bin(self, op, other, swap=False):
        other = self.tape.lift(other)
        a, b = (other, self) if swap else (self, other)
        return self.tape.apply(op, a, b)

    def __add__(self, o):
        return self._bin("add", o)

    def __radd__(self, o):
        return self._bin("add", o, swap=True)

    def __sub__(self, o):
        return self._bin("sub", o)

    def __rsub__(self, o):
        return self._bin("sub", o, swap=True)

    def __mul__(self, o):
        return self._bin("mul", o)

    def __rmul__(self, o):
        return self._bin("mul", o, swap=True)

    def __truediv__(self, o):
        return self._bin("div", o)

    def __rtruediv__(self, o):
        return self._bin("div", o, swap=True)

    def __matmul__(self, o):
        return self._bin("matmul", o)

    def __rmatmul__(self, o):
        return self._bin("matmul", o, swap=True)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __getitem__(self, key):
        return self.tape.apply("getitem", self, key=key)

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", self, shape=shape)


# --- op definitions -------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


_register("add", np.add, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_register("sub", np.subtract, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_register(
    "mul", np.multiply, lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
)
_register(
    "div",
    np.divide,
    lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
)
_register("neg", np.negative, lambda g, out, a: (-g,))


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


_register("matmul", _matmul_fwd, lambda g, out, a, b: (g @ b.T, a.T @ g))
_register("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
# subgradient of max(0, x) at 0 is 0
_register("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),))
_register("exp", np.exp, lambda g, out, a: (g * out,))
_register("log", np.log, lambda g, out, a: (g / a,))
_register("square", np.square, lambda g, out, a: (2.0 * g * a,))


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


_register("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)
_register(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, out, a, shape: (np.reshape(g, a.shape),),
)


def _getitem_vjp(g, out, a, key):
    da = np.zeros_like(a)
    np.add.at(da, key, g)
    return (da,)


_register("getitem", lambda a, key: np.array(a[key]), _getitem_vjp)


def _take_vjp(g, out, a, idx):
    da = np.zeros_like(a)
    np.add.at(da, idx, g)
    return (da,)


_register("take", lambda a, idx: a[idx], _take_vjp)


def _concat_vjp(g, out, *parts, axis):
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, splits, axis=axis))


_register("concat", lambda *parts, axis: np.concatenate(parts, axis=axis), _concat_vjp)


def _lse_fwd(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _lse_vjp(g, out, a, axis):
    w = np.exp(a - np.expand_dims(out, axis))
    return (np.expand_dims(g, axis) * w,)


_register("logsumexp", _lse_fwd, _lse_vjp)


def _norm_vjp(g, out, a, axis):
    o = np.expand_dims(out, axis)
    safe = np.where(o > 0, o, 1.0)
    return (np.where(o > 0, np.expand_dims(g, axis) * a / safe, 0.0),)


_register("norm", lambda a, axis: np.sqrt(np.sum(a * a, axis=axis)), _norm_vjp)


def _conv_fwd(x, w, stride):
    # x: (N, H, W, C), w: (k, k, C, O), valid padding
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NHWC input and kkCO weight, got {x.shape}, {w.shape}")
    k, _, c, o = w.shape
    if x.shape[3] != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[3]}, weight {c}")
    if x.shape[1] < k or x.shape[2] < k:
        raise ValueError(f"conv2d input {x.shape[1:3]} smaller than kernel {k}")
    cols = kernels.im2col(np.ascontiguousarray(x), k, stride)
    n, ho, wo = cols.shape[:3]
    return (cols.reshape(n * ho * wo, -1) @ w.reshape(-1, o)).reshape(n, ho, wo, o)


def _conv_vjp(g, out, x, w, stride, needs=(True, True)):
    k, _, c, o = w.shape
    g2 = g.reshape(-1, o)
    dx = dw = None
    if needs[1]:
        cols = kernels.im2col(np.ascontiguousarray(x), k, stride)
        dw = (cols.reshape(g2.shape[0], -1).T @ g2).reshape(w.shape)
    if needs[0]:
        n, ho, wo = g.shape[:3]
        dcols = np.ascontiguousarray((g2 @ w.reshape(-1, o).T).reshape(n, ho, wo, k, k, c))
        dx = kernels.col2im(dcols, x.shape, stride)
    return dx, dw


_register("conv2d", _conv_fwd, _conv_vjp, selective=True)


# --- functional wrappers ----------------------------------------------------


def tanh(x):
    return x.tape.apply("tanh", x)


def relu(x):
    return x.tape.apply("relu", x)


def exp(x):
    return x.tape.apply("exp", x)


def log(x):
    return x.tape.apply("log", x)


def square(x):
    return x.tape.apply("square", x)


def logsumexp(x, axis):
    return x.tape.apply("logsumexp", x, axis=axis)


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; gradient at the origin is taken as 0."""
    return x.tape.apply("norm", x, axis=axis)


def take(x, idx):
    """Rows of ``x`` selected by an integer index array (repeats allowed)."""
    return x.tape.apply("take", x, idx=np.asarray(idx, dtype=np.intp))


def concat(parts, axis=-1):
    tape = parts[0].tape
    return tape.apply("concat", *[tape.lift(p) for p in parts], axis=axis)


def conv2d(x, w, stride=2):
    return x.tape.apply("conv2d", x, w, stride=stride)


def matmul(a, b):
    return a.tape.apply("matmul", a, b)


# --- evaluation -------------------------------------------------------------


def backward(tape: Tape, output: Var) -> dict[str, np.ndarray]:
    """Gradient of a scalar output with respect to every named leaf.

    Leaves the output does not depend on get zero arrays.
    """
    if output.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    nodes = tape.nodes
    grads: list = [None] * (output.index + 1)
    grads[output.index] = np.ones_like(output.value)
    for i in range(output.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or not node.parents:
            continue
        parent_vals = [nodes[p].value for p in node.parents]
        op = OPS[node.op]
        if op.selective:
            needs = tuple(nodes[p].op != "const" for p in node.parents)
            pgrads = op.vjp(g, node.value, *parent_vals, needs=needs, **node.attrs)
        else:
            pgrads = op.vjp(g, node.value, *parent_vals, **node.attrs)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or nodes[p].op == "const":
                continue
            grads[p] = pg if grads[p] is None else grads[p] + pg
    result = {}
    for node_idx, node in enumerate(nodes):
        if node.name is not None:
            g = grads[node_idx] if node_idx < len(grads) else None
            result[node.name] = np.zeros_like(node.value) if g is None else g
    return result


def forward_eval(tape: Tape, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Replay a recorded tape with new values for its named leaves.

    Leaves not mentioned in ``inputs`` keep their recorded value. Returns the
    outputs registered with :meth:`Tape.mark_output`.
    """
    unknown = set(inputs) - set(tape._named)
    if unknown:
        raise ShapeError(f"unknown inputs: {sorted(unknown)}")
    values: list = []
    for i, node in enumerate(tape.nodes):
        if not node.parents and node.op in ("param", "input", "const"):
            if node.name in inputs:
                v = np.asarray(inputs[node.name], dtype=np.float64)
                if v.shape != node.value.shape:
                    raise ShapeError(
                        f"node {i} ({node.name!r}): expected shape {node.value.shape}, got {v.shape}"
                    )
            else:
                v = node.value
            values.append(v)
            continue
        try:
            v = np.asarray(OPS[node.op].forward(*[values[p] for p in node.parents], **node.attrs))
        except ValueError as exc:
            raise ShapeError(f"node {i} (op {node.op}): {exc}") from None
        if v.shape != node.value.shape:
            raise ShapeError(f"node {i} (op {node.op}): shape changed {node.value.shape} -> {v.shape}")
        values.append(v)
    return {name: values[idx] for name, idx in tape.outputs.items()}


def grad_check(f, point: dict[str, np.ndarray], step=1e-5) -> float:
    """Max relative error between ``backward`` and central differences.

    ``f(tape, **vars)`` must build a scalar on the given tape; the point is
    bound as named parameters, so layers that look parameters up by name on
    the same tape pick them up. The relative
    error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    def evaluate(vals):
        tape = Tape(checked=False)
        out = f(tape, **{k: tape.param(k, v) for k, v in vals.items()})
        return tape, out

    tape, out = evaluate(point)
    analytic = backward(tape, out)
    worst = 0.0
    for name, x in point.items():
        flat = x.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(evaluate(point)[1].value)
            flat[j] = orig - step
            fm = float(evaluate(point)[1].value)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is not finite near {name}[{j}]")
            num = (fp - fm) / (2.0 * step)
            err = abs(a_flat[j] - num) / max(1e-8, abs(a_flat[j]) + abs(num))
            worst = max(worst, err)
    return worst
