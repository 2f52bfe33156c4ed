"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that involves a tensor with ``requires_grad`` records a node
holding its parents and a vector-Jacobian rule.  Nodes get a global sequence
number at creation, so the creation order is the tape: :func:`backward`
replays the reachable part of it in reverse.

Tensors are immutable.  Optimizers produce new leaf tensors rather than
writing into existing ones.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "absolute",
    "concat",
    "einsum",
    "reshape",
    "broadcast_to",
    "total",
    "mean",
    "backward",
]

_tape_counter = itertools.count()

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An immutable float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_rule", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._rule: BackwardRule | None = None
        self._op = "leaf"
        self._seq = next(_tape_counter)

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NumericError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.setflags(write=False)
        out.data = data
        out.name = None
        out._op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._rule = rule
        else:
            out._parents = ()
            out._rule = None
        out._seq = next(_tape_counter)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return (g @ bd.T, ad.T @ g)

    return Tensor._from_op(ad @ bd, "matmul", (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + float(c), "add_scalar", (a,), lambda g: (g,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return Tensor._from_op(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor._from_op(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "abs": absolute, "neg": neg}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply a named pointwise operation (add, sub, mul, sigmoid, tanh, abs, neg)."""
    a = _as_tensor(a)
    if op in _BINARY:
        if b is None:
            raise ContractError(f"elementwise {op} needs two operands")
        return _BINARY[op](a, _as_tensor(b))
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"elementwise {op} takes one operand")
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


def concat(axis: int, tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            d1 != d2 for k, (d1, d2) in enumerate(zip(t.shape, ref.shape)) if k != axis
        ):
            raise DimensionError(
                f"concat on axis {axis}: incompatible shapes {[x.shape for x in tensors]}"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, "concat", tuple(tensors), rule)


def _parse_subscripts(subscripts: str, n_operands: int) -> tuple[list[str], str]:
    if "->" not in subscripts or "." in subscripts:
        raise ContractError(f"einsum needs explicit output and no ellipsis: {subscripts!r}")
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n_operands:
        raise ContractError(f"einsum {subscripts!r} expects {len(ins)} operands, got {n_operands}")
    for s in ins:
        if len(set(s)) != len(s):
            raise ContractError(f"einsum: repeated index within operand {s!r} is not supported")
    for k, s in enumerate(ins):
        others = set(out).union(*(ins[j] for j in range(len(ins)) if j != k))
        if not set(s) <= others:
            raise ContractError(f"einsum: operand {s!r} has indices summed in isolation")
    return ins, out


def _contract(ins: list[str], out: str, arrays: Sequence[np.ndarray]) -> np.ndarray:
    """``np.einsum`` with a BLAS fast path for plain two-operand contractions."""
    if len(ins) == 2:
        sa, sb = ins
        shared = [c for c in sa if c in sb]
        rest = [c for c in sa if c not in shared] + [c for c in sb if c not in shared]
        if not set(shared) & set(out) and sorted(rest) == sorted(out):
            res = np.tensordot(
                arrays[0], arrays[1], axes=([sa.index(c) for c in shared], [sb.index(c) for c in shared])
            )
            return res.transpose([rest.index(c) for c in out])
    return np.einsum(",".join(ins) + "->" + out, *arrays)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable tensor contraction in explicit ``"ab,bc->ac"`` form."""
    ops = [_as_tensor(o) for o in operands]
    ins, out = _parse_subscripts(subscripts, len(ops))
    datas = [o.data for o in ops]
    shapes_ok = all(len(s) == d.ndim for s, d in zip(ins, datas))
    try:
        if not shapes_ok:
            raise ValueError("operand rank does not match its subscripts")
        result = _contract(ins, out, datas)
    except ValueError as exc:
        shapes = ", ".join(str(d.shape) for d in datas)
        raise DimensionError(f"einsum {subscripts!r} on shapes {shapes}: {exc}") from None

    def rule(g):
        grads = []
        for k, op in enumerate(ops):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [j for j in range(len(ops)) if j != k]
            grads.append(_contract([out] + [ins[j] for j in others], ins[k], [g] + [datas[j] for j in others]))
        return grads

    return Tensor._from_op(result, "einsum", tuple(ops), rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return Tensor._from_op(data, "reshape", (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast; the gradient sums over the replicated axes."""
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)
    kept = tuple(i + lead for i, d in enumerate(src) if d == 1 and shape[i + lead] != 1)

    def rule(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if kept:
            g = g.sum(axis=tuple(k - lead for k in kept), keepdims=True)
        return (g,)

    return Tensor._from_op(np.array(data), "broadcast", (a,), rule)


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.array(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.size)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable leaf it depends on.

    The result maps each reachable leaf created with ``requires_grad=True``
    to an array of its own shape.  Contributions from multiple uses of a node
    are summed.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes or not node.requires_grad:
            continue
        nodes[id(node)] = node
        stack.extend(node._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
        g = grads.get(id(node))
        if g is None or node._rule is None:
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    leaves = {}
    for key, node in nodes.items():
        if node._op == "leaf":
            g = grads.get(key)
            leaves[node] = np.zeros(node.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(node.shape)
    return leaves
