"""Tape-based reverse-mode automatic differentiation.

A :class:`Tape` is an append-only list of primitive-op nodes.  Nodes are
evaluated eagerly as they are recorded, and the whole tape can be replayed
on new variable bindings with :func:`evaluate`.

:func:`gradient` records the backward pass onto the same tape out of the
same primitives, so a gradient is itself an ordinary node that can be
differentiated again.  Hessian-vector products and mixed second
derivatives are built on that.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class EngineError(Exception):
    """Base class for autodiff errors."""


class ShapeError(EngineError):
    pass


class UnboundVariableError(EngineError):
    pass


class NonDifferentiableError(EngineError):
    pass


class IndependentInputWarning(UserWarning):
    """The differentiated scalar does not depend on the requested input."""


# --------------------------------------------------------------------------
# parameter vectors


@dataclass
class ParamVector:
    """Flat parameter vector with a named-segment map.

    ``segments`` maps name -> (offset, shape) and tiles ``[0, P)`` exactly,
    in insertion order.  ``trainable`` lists the segments that training and
    influence computations differentiate; the rest are frozen.
    """

    data: np.ndarray
    segments: dict[str, tuple[int, tuple[int, ...]]]
    trainable: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        pos = 0
        for name, (offset, shape) in self.segments.items():
            if offset != pos:
                raise ValueError(f"segment {name!r} starts at {offset}, expected {pos}")
            pos += int(np.prod(shape))
        if pos != self.data.size:
            raise ValueError(f"segments cover {pos} entries, data has {self.data.size}")
        if not self.trainable:
            self.trainable = tuple(self.segments)
        for name in self.trainable:
            if name not in self.segments:
                raise KeyError(name)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], trainable=()) -> "ParamVector":
        segments, chunks, pos = {}, [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            segments[name] = (pos, arr.shape)
            chunks.append(arr.ravel())
            pos += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, segments, tuple(trainable))

    def __len__(self):
        return self.data.size

    def __getitem__(self, name) -> np.ndarray:
        offset, shape = self.segments[name]
        return self.data[offset:offset + int(np.prod(shape))].reshape(shape)

    @property
    def n_trainable(self) -> int:
        return sum(int(np.prod(self.segments[n][1])) for n in self.trainable)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self[name] for name in self.segments}

    def flatten(self, arrays: dict[str, np.ndarray], names=None) -> np.ndarray:
        """Concatenate per-segment arrays (default: trainable order)."""
        names = self.trainable if names is None else names
        return np.concatenate([np.asarray(arrays[n], dtype=np.float64).ravel() for n in names])

    def split(self, flat: np.ndarray, names=None) -> dict[str, np.ndarray]:
        """Inverse of :meth:`flatten`."""
        names = self.trainable if names is None else names
        out, pos = {}, 0
        for n in names:
            shape = self.segments[n][1]
            size = int(np.prod(shape))
            out[n] = np.asarray(flat[pos:pos + size]).reshape(shape)
            pos += size
        if pos != len(flat):
            raise ShapeError(f"vector of length {len(flat)} does not match segments of total {pos}")
        return out

    def trainable_vector(self) -> np.ndarray:
        return self.flatten(self.arrays())

    def with_trainable(self, flat: np.ndarray) -> "ParamVector":
        """Copy with the trainable segments replaced by ``flat``."""
        if len(flat) != self.n_trainable:
            raise ShapeError(f"expected {self.n_trainable} trainable entries, got {len(flat)}")
        data = self.data.copy()
        pos = 0
        for n in self.trainable:
            offset, shape = self.segments[n]
            size = int(np.prod(shape))
            data[offset:offset + size] = flat[pos:pos + size]
            pos += size
        return ParamVector(data, dict(self.segments), self.trainable)

    def bind(self, tape: "Tape") -> dict[str, "Node"]:
        return {name: tape.variable(name, self[name]) for name in self.segments}


# --------------------------------------------------------------------------
# primitives


class Primitive:
    def __init__(self, name, forward, vjp=None):
        self.name = name
        self.forward = forward
        self.vjp = vjp

    @property
    def differentiable(self):
        return self.vjp is not None


OPS: dict[str, Primitive] = {}


def _register(name, vjp=None):
    def deco(fwd):
        OPS[name] = Primitive(name, fwd, vjp)
        return fwd
    return deco


def _broadcast_shape(a, b, op):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if a.ndim == 2 and b.ndim == 2:
        for sa, sb in zip(a.shape, b.shape):
            if sa != sb and sa != 1 and sb != 1:
                break
        else:
            return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _fwd_add(a, b):
    _broadcast_shape(a, b, "add")
    return a + b


def _fwd_mul(a, b):
    _broadcast_shape(a, b, "mul")
    return a * b


def _fwd_matmul(a, b, ta=False, tb=False):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    a = a.T if ta else a
    b = b.T if tb else b
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape}")
    return a @ b


def _fwd_gather(table, index):
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table with {table.shape[0]} rows")
    return table[index]


def _fwd_scatter_add(g, index, n_rows):
    if g.ndim != 2 or g.shape[0] != index.size:
        raise ShapeError(f"scatter_add: {g.shape} rows vs {index.size} indices")
    return kernels.scatter_add_rows(g, index, n_rows)


def _fwd_mean_rows(x, offsets):
    if x.ndim != 2 or offsets[-1] != x.shape[0]:
        raise ShapeError(f"mean_rows: {x.shape} does not match segment end {offsets[-1]}")
    return kernels.segment_mean(x, offsets)


def _fwd_spread_rows(g, offsets):
    if g.ndim != 2 or g.shape[0] != len(offsets) - 1:
        raise ShapeError(f"spread_rows: {g.shape} vs {len(offsets) - 1} segments")
    return kernels.segment_spread(g, offsets)


def _fwd_softmax(x):
    if x.ndim != 2:
        raise ShapeError(f"softmax: expected 2-D input, got {x.shape}")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _fwd_sum(x, axis=None):
    if axis is None:
        return np.asarray(x.sum())
    if x.ndim != 2:
        raise ShapeError(f"sum over axis {axis}: expected 2-D input, got {x.shape}")
    return x.sum(axis=axis, keepdims=True)


def _fwd_inner(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"inner: shapes {a.shape} and {b.shape} differ")
    return np.asarray(np.dot(a.ravel(), b.ravel()))


def _fwd_argmax_onehot(x):
    out = np.zeros_like(x)
    out[np.arange(x.shape[0]), np.argmax(x, axis=1)] = 1.0
    return out


# vjps take (upstream adjoint node, output node, input nodes, attrs) and
# return one adjoint node (or None) per input, built from recorded ops.


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return sum_(g)
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = sum_(g, axis=axis)
    return g


def _vjp_add(g, out, inputs, attrs):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_mul(g, out, inputs, attrs):
    a, b = inputs
    return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)


def _vjp_matmul(g, out, inputs, attrs):
    a, b = inputs
    ta, tb = attrs.get("ta", False), attrs.get("tb", False)
    ga = matmul(b, g, ta=tb, tb=True) if ta else matmul(g, b, tb=not tb)
    gb = matmul(g, a, ta=True, tb=ta) if tb else matmul(a, g, ta=not ta)
    return ga, gb


def _vjp_gather(g, out, inputs, attrs):
    table = inputs[0]
    return (scatter_add(g, attrs["index"], table.shape[0]),)


def _vjp_scatter_add(g, out, inputs, attrs):
    return (gather(g, attrs["index"]),)


def _vjp_mean_rows(g, out, inputs, attrs):
    return (spread_rows(g, attrs["offsets"]),)


def _vjp_spread_rows(g, out, inputs, attrs):
    return (mean_rows(g, attrs["offsets"]),)


def _vjp_tanh(g, out, inputs, attrs):
    return (mul(g, add(1.0, mul(-1.0, mul(out, out)))),)


def _vjp_exp(g, out, inputs, attrs):
    return (mul(g, out),)


def _vjp_log(g, out, inputs, attrs):
    return (mul(g, reciprocal(inputs[0])),)


def _vjp_reciprocal(g, out, inputs, attrs):
    return (mul(g, mul(-1.0, mul(out, out))),)


def _vjp_softmax(g, out, inputs, attrs):
    centered = add(g, mul(-1.0, sum_(mul(g, out), axis=1)))
    return (mul(out, centered),)


def _vjp_sum(g, out, inputs, attrs):
    # broadcasting g (scalar, 1 x m or n x 1) against ones restores the input shape
    x = inputs[0]
    return (mul(g, x.tape.constant(np.ones(x.shape))),)


def _vjp_inner(g, out, inputs, attrs):
    a, b = inputs
    return mul(g, b), mul(g, a)


_register("add", _vjp_add)(_fwd_add)
_register("mul", _vjp_mul)(_fwd_mul)
_register("matmul", _vjp_matmul)(_fwd_matmul)
_register("gather", _vjp_gather)(_fwd_gather)
_register("scatter_add", _vjp_scatter_add)(_fwd_scatter_add)
_register("mean_rows", _vjp_mean_rows)(_fwd_mean_rows)
_register("spread_rows", _vjp_spread_rows)(_fwd_spread_rows)
_register("tanh", _vjp_tanh)(np.tanh)
_register("exp", _vjp_exp)(np.exp)
_register("log", _vjp_log)(np.log)
_register("reciprocal", _vjp_reciprocal)(np.reciprocal)
_register("softmax", _vjp_softmax)(_fwd_softmax)
_register("sum", _vjp_sum)(_fwd_sum)
_register("inner", _vjp_inner)(_fwd_inner)
_register("argmax_onehot")(_fwd_argmax_onehot)


# --------------------------------------------------------------------------
# tape and nodes


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "attrs", "value", "name")

    def __init__(self, tape, id, op, inputs, attrs, value, name=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.tape), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self.tape), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of primitive operations (a DAG in topological order)."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.variables: dict[str, Node] = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, attrs, value, name=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), attrs, value, name)
        self.nodes.append(node)
        return node

    def variable(self, name: str, value) -> Node:
        if name in self.variables:
            raise ValueError(f"variable {name!r} already on tape")
        node = self._append("variable", (), {}, np.array(value, dtype=np.float64), name)
        self.variables[name] = node
        return node

    def constant(self, value) -> Node:
        return self._append("constant", (), {}, np.array(value, dtype=np.float64))

    def record(self, op: str, inputs, **attrs) -> Node:
        prim = OPS[op]
        for x in inputs:
            if x.tape is not self:
                raise EngineError(f"{op}: operand from a different tape")
        try:
            value = prim.forward(*(x.value for x in inputs), **attrs)
        except ShapeError as exc:
            raise ShapeError(f"node {len(self.nodes)} ({op}): {exc}") from None
        return self._append(op, inputs, attrs, np.asarray(value, dtype=np.float64))


def _lift(x, tape) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise EngineError("at least one operand must be a Node")


def _binary(op, a, b, **attrs):
    tape = _tape_of(a, b)
    return tape.record(op, (_lift(a, tape), _lift(b, tape)), **attrs)


def add(a, b) -> Node:
    return _binary("add", a, b)


def mul(a, b) -> Node:
    return _binary("mul", a, b)


def matmul(a, b, ta=False, tb=False) -> Node:
    return _binary("matmul", a, b, ta=ta, tb=tb)


def gather(table: Node, index) -> Node:
    """Row gather (embedding lookup): ``table[index]``."""
    return table.tape.record("gather", (table,), index=np.asarray(index, dtype=np.int_))


def scatter_add(g: Node, index, n_rows: int) -> Node:
    return g.tape.record("scatter_add", (g,), index=np.asarray(index, dtype=np.int_), n_rows=int(n_rows))


def mean_rows(x: Node, offsets=None) -> Node:
    """Mean over each row segment ``offsets[s]:offsets[s+1]`` (default: all rows)."""
    if offsets is None:
        offsets = [0, x.shape[0]]
    offsets = np.asarray(offsets, dtype=np.int_)
    if np.any(np.diff(offsets) <= 0):
        raise ShapeError("mean_rows: every segment needs at least one row")
    return x.tape.record("mean_rows", (x,), offsets=offsets)


def spread_rows(g: Node, offsets) -> Node:
    return g.tape.record("spread_rows", (g,), offsets=np.asarray(offsets, dtype=np.int_))


def tanh(x: Node) -> Node:
    return x.tape.record("tanh", (x,))


def exp(x: Node) -> Node:
    return x.tape.record("exp", (x,))


def log(x: Node) -> Node:
    return x.tape.record("log", (x,))


def reciprocal(x: Node) -> Node:
    return x.tape.record("reciprocal", (x,))


def softmax(x: Node) -> Node:
    """Row-wise softmax of a 2-D node."""
    return x.tape.record("softmax", (x,))


def sum_(x: Node, axis=None) -> Node:
    """Full sum (scalar) or 2-D sum over ``axis`` keeping dims."""
    return x.tape.record("sum", (x,), axis=axis)


def inner(a, b) -> Node:
    return _binary("inner", a, b)


def argmax_onehot(x: Node) -> Node:
    """One-hot of the row argmax.  Not differentiable."""
    return x.tape.record("argmax_onehot", (x,))


# --------------------------------------------------------------------------
# evaluation and differentiation


def evaluate(tape: Tape, bindings: dict, outputs=None):
    """Replay ``tape`` with new variable values.

    Args:
        tape: the recorded program.
        bindings: variable name -> array, one entry per tape variable.
        outputs: a node or list of nodes to return (default: last node).

    Returns:
        The value of ``outputs`` (a list of arrays when a list is given).
        The tape itself is left untouched.
    """
    for name in tape.variables:
        if name not in bindings:
            raise UnboundVariableError(f"variable {name!r} is not bound")
    values: list[np.ndarray] = [None] * len(tape.nodes)  # type: ignore[list-item]
    for node in tape.nodes:
        if node.op == "variable":
            val = np.asarray(bindings[node.name], dtype=np.float64)
            if val.shape != node.value.shape:
                raise ShapeError(
                    f"node {node.id} (variable {node.name!r}): bound shape {val.shape}, "
                    f"recorded {node.value.shape}")
            values[node.id] = val
        elif node.op == "constant":
            values[node.id] = node.value
        else:
            values[node.id] = _forward_node(node, values)
    if outputs is None:
        return values[-1]
    if isinstance(outputs, Node):
        return values[outputs.id]
    return [values[o.id] for o in outputs]


def _forward_node(node, values):
    args = [values[x.id] for x in node.inputs]
    try:
        return np.asarray(OPS[node.op].forward(*args, **node.attrs))
    except ShapeError as exc:
        raise ShapeError(f"node {node.id} ({node.op}): {exc}") from None


class PartialReplay:
    """Repeated evaluation when only some variables change between calls.

    The tape is replayed once with ``bindings``; afterwards each call
    recomputes only the ancestors of ``outputs`` that depend on ``free``
    variables.  Results match :func:`evaluate` bit for bit.
    """

    def __init__(self, tape: Tape, bindings: dict, outputs, free):
        self.tape = tape
        self.outputs = [outputs] if isinstance(outputs, Node) else list(outputs)
        self.free = {n: tape.variables[n] for n in free}
        last = max(o.id for o in self.outputs)
        self._values = evaluate(tape, bindings, list(tape.nodes[: last + 1]))
        dirty = np.zeros(last + 1, dtype=bool)
        for node in self.free.values():
            dirty[node.id] = True
        needed = np.zeros(last + 1, dtype=bool)
        for o in self.outputs:
            needed[o.id] = True
        for node in reversed(tape.nodes[: last + 1]):
            if needed[node.id]:
                for x in node.inputs:
                    needed[x.id] = True
        for node in tape.nodes[: last + 1]:
            if not dirty[node.id] and any(dirty[x.id] for x in node.inputs):
                dirty[node.id] = True
        self._replay = [n for n in tape.nodes[: last + 1]
                        if dirty[n.id] and needed[n.id] and n.op != "variable"]

    def __call__(self, bindings: dict):
        values = list(self._values)
        for name, node in self.free.items():
            if name not in bindings:
                raise UnboundVariableError(f"variable {name!r} is not bound")
            val = np.asarray(bindings[name], dtype=np.float64)
            if val.shape != node.value.shape:
                raise ShapeError(f"variable {name!r}: bound shape {val.shape}, recorded {node.value.shape}")
            values[node.id] = val
        for node in self._replay:
            values[node.id] = _forward_node(node, values)
        return [values[o.id] for o in self.outputs]


def _relevant(tape, output, wrt_ids):
    """Ids of nodes lying on some path from a wrt node to ``output``."""
    reaches = np.zeros(output.id + 1, dtype=bool)
    for i in wrt_ids:
        if i <= output.id:
            reaches[i] = True
    for node in tape.nodes[: output.id + 1]:
        if not reaches[node.id] and any(reaches[x.id] for x in node.inputs):
            reaches[node.id] = True
    needed = np.zeros(output.id + 1, dtype=bool)
    needed[output.id] = True
    for node in reversed(tape.nodes[: output.id + 1]):
        if needed[node.id]:
            for x in node.inputs:
                needed[x.id] = True
    return reaches & needed


def gradient(tape: Tape, output: Node, wrt):
    """Reverse-mode gradient of a scalar node.

    Args:
        tape: tape holding ``output``.
        output: scalar node.
        wrt: a node or sequence of nodes (variables or intermediates).

    Returns:
        Adjoint node(s) matching ``wrt``.  They live on ``tape`` and can be
        differentiated again.  Inputs the output does not depend on get a
        zero constant.
    """
    single = isinstance(wrt, Node)
    wrt_list = [wrt] if single else list(wrt)
    if output.value.size != 1 or output.value.ndim != 0:
        raise ShapeError(f"gradient: output node {output.id} has shape {output.shape}, expected scalar")
    wrt_ids = {w.id for w in wrt_list}
    on_path = _relevant(tape, output, wrt_ids)

    adjoint: dict[int, Node] = {output.id: tape.constant(1.0)}
    for node in reversed(tape.nodes[: output.id + 1]):
        if not on_path[node.id] or node.id not in adjoint or not node.inputs:
            continue
        prim = OPS[node.op]
        if not prim.differentiable:
            raise NonDifferentiableError(f"op {node.op!r} at node {node.id} is not differentiable")
        grads = prim.vjp(adjoint[node.id], node, node.inputs, node.attrs)
        for x, gx in zip(node.inputs, grads):
            if gx is None or not on_path[x.id]:
                continue
            adjoint[x.id] = add(adjoint[x.id], gx) if x.id in adjoint else gx

    out = [adjoint.get(w.id) or tape.constant(np.zeros(w.shape)) for w in wrt_list]
    return out[0] if single else out


def _param_nodes(tape, params: ParamVector, names):
    names = params.trainable if names is None else names
    try:
        return names, [tape.variables[n] for n in names]
    except KeyError as exc:
        raise UnboundVariableError(f"parameter segment {exc.args[0]!r} is not a tape variable") from None


def hvp(tape: Tape, loss: Node, params: ParamVector, v, names=None) -> np.ndarray:
    """Hessian-vector product of ``loss`` w.r.t. the parameter segments.

    Computed as the gradient of <grad loss, v>; the Hessian is never formed.
    """
    names, nodes = _param_nodes(tape, params, names)
    v = np.asarray(v, dtype=np.float64)
    size = sum(n.value.size for n in nodes)
    if v.shape != (size,):
        raise ShapeError(f"hvp: vector of shape {v.shape}, parameters have {size} entries")
    grads = gradient(tape, loss, nodes)
    pieces = params.split(v, names)
    dot = None
    for n, g in zip(names, grads):
        term = inner(g, tape.constant(pieces[n]))
        dot = term if dot is None else add(dot, term)
    second = gradient(tape, dot, nodes)
    return np.concatenate([s.value.ravel() for s in second])


def mixed_gradient(tape: Tape, scalar: Node, inner_wrt: Node, params: ParamVector,
                   names=None, direction=None) -> np.ndarray:
    """Gradient w.r.t. parameters of the summed inner derivative.

    Returns d/dtheta <d scalar / d inner_wrt, direction>, where ``direction``
    defaults to all ones (plain component sum).  When ``scalar`` does not
    depend on ``inner_wrt`` a zero vector is returned with an
    :class:`IndependentInputWarning`.
    """
    names, nodes = _param_nodes(tape, params, names)
    size = sum(n.value.size for n in nodes)
    on_path = _relevant(tape, scalar, {inner_wrt.id})
    if not on_path[inner_wrt.id]:
        warnings.warn("scalar does not depend on the inner variable", IndependentInputWarning, stacklevel=2)
        return np.zeros(size)
    if direction is None:
        direction = np.ones(inner_wrt.shape)
    g_inner = gradient(tape, scalar, inner_wrt)
    reduced = inner(g_inner, tape.constant(direction))
    outer = gradient(tape, reduced, nodes)
    return np.concatenate([o.value.ravel() for o in outer])


def flat_gradient(tape: Tape, output: Node, params: ParamVector, names=None) -> np.ndarray:
    names, nodes = _param_nodes(tape, params, names)
    return np.concatenate([g.value.ravel() for g in gradient(tape, output, nodes)])
