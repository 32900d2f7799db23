"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are dispatched through a registry of primitives. Every primitive
pairs a numpy forward with a vector-Jacobian rule. When a :class:`Tape` is
active and any input is tracked, the call is appended to the tape; backward
then walks the tape once in reverse order.

    >>> x = Param([3.0])
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)[x]
    array([6.])

Outside a tape the same calls just compute values, which is how samplers and
finite-difference checks run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    __array_ufunc__ = None  # let numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data, t.requires_grad, t.name, t._tape, t._node = arr, False, None, None, None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, data={np.array2string(self.data, threshold=8)})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Param(Tensor):
    """Trainable leaf tensor; carries its gradient and AdamW moments."""

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str | None  # None marks a leaf
    inputs: tuple[int, ...]
    saved: tuple[np.ndarray, ...] = ()
    out: np.ndarray | None = None
    attrs: dict = field(default_factory=dict)


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive calls for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_of: dict[int, int] = {}
        self._leaves: list[Tensor] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _node_for(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            key = id(t)
            if key not in self._leaf_of:
                self._leaf_of[key] = len(self.nodes)
                self.nodes.append(Node(None, ()))
                self._leaves.append(t)
            return self._leaf_of[key]
        return None

    def record(self, op, inputs: Sequence[Tensor], out: Tensor, attrs: dict) -> None:
        ids = [self._node_for(t) for t in inputs]
        if all(i is None for i in ids):
            return
        idx = len(self.nodes)
        self.nodes.append(
            Node(op, tuple(-1 if i is None else i for i in ids),
                 tuple(t.data for t in inputs), out.data, attrs)
        )
        out._tape = self
        out._node = idx

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``root`` for every tracked leaf.

        Param leaves also get their ``grad`` attribute overwritten.
        """
        if root.shape != ():
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if self._done:
            raise ContractError("tape already consumed by a backward pass")
        if root._tape is not self:
            return {}
        self._done = True
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root._node] = np.ones((), dtype=np.float64)
        for idx in range(root._node, -1, -1):
            node = self.nodes[idx]
            g = grads[idx]
            if g is None or node.op is None:
                continue
            prim = PRIMITIVES[node.op]
            in_grads = prim.backward(g, node.out, *node.saved, **node.attrs)
            for src, ig in zip(node.inputs, in_grads):
                if src < 0 or ig is None:
                    continue
                if not np.all(np.isfinite(ig)):
                    raise NumericError(f"{node.op}: non-finite gradient in backward pass")
                grads[src] = ig if grads[src] is None else grads[src] + ig
            grads[idx] = None  # intermediate grads are not kept
        result = {}
        for leaf_t, leaf_idx in zip(self._leaves, (self._leaf_of[id(t)] for t in self._leaves)):
            g = grads[leaf_idx]
            if g is None:
                g = np.zeros_like(leaf_t.data)
            result[leaf_t] = g
            if isinstance(leaf_t, Param):
                leaf_t.grad = g
        return result


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(root)


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name: str, forward, backward) -> Primitive:
    prim = Primitive(name, forward, backward)
    PRIMITIVES[name] = prim
    return prim


def apply_primitive(name: str, *inputs, **attrs) -> Tensor:
    """Run primitive ``name`` on ``inputs`` and record it on the active tape."""
    try:
        prim = PRIMITIVES[name]
    except KeyError:
        raise ContractError(f"unknown primitive {name!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    with np.errstate(all="ignore"):
        out_data = prim.forward(*(t.data for t in tensors), **attrs)
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{name}: non-finite output")
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None:
        tape.record(name, tensors, out, attrs)
    return out


# ---------------------------------------------------------------------------
# helpers


def broadcast_shapes(op: str, *shapes) -> tuple[int, ...]:
    ndim = max(len(s) for s in shapes)
    out = []
    for dims in zip(*[(1,) * (ndim - len(s)) + tuple(s) for s in shapes]):
        sizes = {d for d in dims if d != 1}
        if len(sizes) > 1:
            raise ShapeError(op, *shapes)
        out.append(sizes.pop() if sizes else 1)
    return tuple(out)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _elementwise(op):
    def fwd(a, b):
        broadcast_shapes(op.__name__, a.shape, b.shape)
        return op(a, b)

    return fwd


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, tuple(sorted(axes)))
    return np.broadcast_to(g, shape)


def _swap(x):
    return np.swapaxes(x, -1, -2)


# elementwise binary
register_primitive(
    "add", _elementwise(np.add),
    lambda g, out, a, b: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
)
register_primitive(
    "sub", _elementwise(np.subtract),
    lambda g, out, a, b: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
)
register_primitive(
    "mul", _elementwise(np.multiply),
    lambda g, out, a, b: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)),
)
register_primitive(
    "div", _elementwise(np.divide),
    lambda g, out, a, b: (unbroadcast(g / b, a.shape), unbroadcast(-g * out / b, b.shape)),
)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    broadcast_shapes("matmul", a.shape[:-2], b.shape[:-2])
    return a @ b


register_primitive(
    "matmul", _matmul_fwd,
    lambda g, out, a, b: (unbroadcast(g @ _swap(b), a.shape), unbroadcast(_swap(a) @ g, b.shape)),
)

# unary
register_primitive("neg", np.negative, lambda g, out, x: (-g,))
register_primitive("exp", np.exp, lambda g, out, x: (g * out,))
register_primitive("log", np.log, lambda g, out, x: (g / x,))
register_primitive("sqrt", np.sqrt, lambda g, out, x: (g / (2.0 * out),))
register_primitive("abs", np.abs, lambda g, out, x: (g * np.sign(x),))
register_primitive("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),))
register_primitive(
    "power", lambda x, p: np.power(x, p),
    lambda g, out, x, p: (g * p * np.power(x, p - 1),),
)
register_primitive(
    "clip_min", lambda x, lo: np.maximum(x, lo),
    lambda g, out, x, lo: (g * (x > lo),),
)


def _gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + _GELU_C * x * x * x)))


def _gelu_bwd(g, out, x):
    th = np.tanh(_GELU_K * (x + _GELU_C * x * x * x))
    d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return (g * d,)


register_primitive("gelu_tanh", _gelu_fwd, _gelu_bwd)

# reductions
register_primitive(
    "sum", lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
    lambda g, out, x, axis=None, keepdims=False: (_expand_reduced(g, x.shape, axis, keepdims).copy(),),
)


def _mean_bwd(g, out, x, axis=None, keepdims=False):
    count = x.size // max(out.size, 1) if x.size else 1
    return (_expand_reduced(g, x.shape, axis, keepdims) / count,)


register_primitive(
    "mean", lambda x, axis=None, keepdims=False: np.mean(x, axis=axis, keepdims=keepdims), _mean_bwd
)


def _softmax_fwd(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


register_primitive(
    "softmax", _softmax_fwd,
    lambda g, out, x, axis=-1: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
)


def _ln_fwd(x, eps=1e-10):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _ln_bwd(g, out, x, eps=1e-10):
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    gm = g.mean(axis=-1, keepdims=True)
    gxm = (g * out).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - out * gxm),)


register_primitive("layer_norm", _ln_fwd, _ln_bwd)

# structural


def _concat_fwd(*xs, axis=0):
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None


def _concat_bwd(g, out, *xs, axis=0):
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, splits, axis=axis))


register_primitive("concat", _concat_fwd, _concat_bwd)


def _getitem_bwd(g, out, x, key=None):
    full = np.zeros_like(x)
    np.add.at(full, key, g)
    return (full,)


register_primitive("slice", lambda x, key=None: x[key], _getitem_bwd)


def _transpose_bwd(g, out, x, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (np.transpose(g, inv),)


register_primitive("transpose", lambda x, axes=None: np.transpose(x, axes), _transpose_bwd)


def _reshape_fwd(x, shape=None):
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None


register_primitive("reshape", _reshape_fwd, lambda g, out, x, shape=None: (g.reshape(x.shape),))


def _broadcast_fwd(x, shape=None):
    target = broadcast_shapes("broadcast", x.shape, shape)
    if target != tuple(shape):
        raise ShapeError("broadcast", x.shape, shape)
    return np.broadcast_to(x, shape).copy()


register_primitive(
    "broadcast", _broadcast_fwd, lambda g, out, x, shape=None: (unbroadcast(g, x.shape),)
)


# ---------------------------------------------------------------------------
# functional front end


def add(a, b):
    return apply_primitive("add", a, b)


def sub(a, b):
    return apply_primitive("sub", a, b)


def mul(a, b):
    return apply_primitive("mul", a, b)


def div(a, b):
    return apply_primitive("div", a, b)


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def neg(x):
    return apply_primitive("neg", x)


def exp(x):
    return apply_primitive("exp", x)


def log(x):
    return apply_primitive("log", x)


def sqrt(x):
    return apply_primitive("sqrt", x)


def abs_(x):
    return apply_primitive("abs", x)


def tanh(x):
    return apply_primitive("tanh", x)


def gelu_tanh(x):
    return apply_primitive("gelu_tanh", x)


def power(x, p: float):
    return apply_primitive("power", x, p=float(p))


def clip_min(x, lo: float):
    return apply_primitive("clip_min", x, lo=float(lo))


def sum_(x, axis=None, keepdims=False):
    return apply_primitive("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", x, axis=axis, keepdims=keepdims)


def softmax(x, axis=-1):
    return apply_primitive("softmax", x, axis=axis)


def layer_norm(x, eps: float = 1e-10):
    """Normalize over the last axis; no affine part (AdaLN supplies it)."""
    return apply_primitive("layer_norm", x, eps=eps)


def concat(xs: Iterable, axis=0):
    return apply_primitive("concat", *xs, axis=axis)


def getitem(x, key):
    return apply_primitive("slice", x, key=key)


def transpose(x, axes=None):
    return apply_primitive("transpose", x, axes=None if axes is None else tuple(axes))


def reshape(x, shape):
    return apply_primitive("reshape", x, shape=tuple(shape))


def broadcast_to(x, shape):
    return apply_primitive("broadcast", x, shape=tuple(shape))


def square(x):
    return mul(x, x)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class CoordCheck:
    tensor: int
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    coords: list[CoordCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.coords)

    @property
    def max_rel_err(self) -> float:
        return max((c.rel_err for c in self.coords), default=0.0)

    def failures(self) -> list[CoordCheck]:
        return [c for c in self.coords if not c.passed]


def grad_check(
    f: Callable[..., Tensor],
    point: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    max_coords: int | None = None,
    rng=None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*point)`` to central differences.

    ``rel_err = |a - n| / max(|a|, |n|, floor)``. ``floor`` keeps near-zero
    gradients from turning round-off into huge relative errors. With
    ``max_coords`` set, that many coordinates per tensor are checked, chosen
    by ``rng`` (default: the first ones in row-major order).
    """
    if h <= 0:
        raise ContractError("finite-difference step h must be positive")
    point = list(point)
    saved_flags = [t.requires_grad for t in point]
    for t in point:
        t.requires_grad = True
    try:
        with Tape() as tape:
            root = f(*point)
        grads = tape.backward(root) if root._tape is tape else {}
    finally:
        for t, flag in zip(point, saved_flags):
            t.requires_grad = flag

    coords: list[CoordCheck] = []
    for ti, t in enumerate(point):
        analytic = grads.get(t, np.zeros_like(t.data))
        n = t.data.size
        if max_coords is None or max_coords >= n:
            flat_ids = np.arange(n)
        elif rng is not None:
            flat_ids = np.sort(rng.permutation(n)[:max_coords])
        else:
            flat_ids = np.arange(max_coords)
        for flat in flat_ids:
            idx = np.unravel_index(int(flat), t.shape) if t.shape else ()
            orig = t.data[idx].copy()
            t.data[idx] = orig + h
            fp = f(*point).item()
            t.data[idx] = orig - h
            fm = f(*point).item()
            t.data[idx] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(analytic[idx])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            coords.append(CoordCheck(ti, tuple(int(i) for i in idx), a, num, err, err <= tol))
    return GradCheckReport(coords, tol)
