"""Dense float64 tensors with reverse-mode automatic differentiation.

Every mathematical operation in this package is expressed through the small
op set below, so one finite-difference oracle (:func:`finite_diff_grad`)
validates the whole stack.  The design is deliberately plain: a ``Tensor``
owns its value, an optional gradient accumulator and a backward closure;
``backward()`` walks the graph in reverse topological order.

Gradients accumulate additively across fan-out and are only cleared by an
explicit ``zero_grad()``.  Backward is deterministic: the traversal order is
a pure function of graph construction order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A dense real array plus the bookkeeping needed for backprop.

    Parameters are created with ``requires_grad=True``; everything reachable
    from them through an op tracks gradients automatically.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- small conveniences -------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return scale(tsum(self, None), 1.0 / self.size)

    # -- reverse-mode sweep ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``grad``.

        ``self`` must hold a single scalar.  Calling twice without zeroing
        doubles the gradients; that additivity is what gradient accumulation
        over micro-batches relies on.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, shape is {self.shape}")

        order = _topo_order(self)
        _accumulate(self, np.ones_like(self.data))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate grads are only scratch space; free them so repeated
        # backward passes (after zero_grad on leaves) start clean
        for node in order:
            if node._backward is not None:
                node.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order via an iterative DFS (graphs get deep)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad or p._backward is not None)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: operand shapes differ, {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)

        def bwd_scalar(g, a=a):
            _accumulate(a, g)

        return _make(a.data + c, (a,), bwd_scalar)
    a = as_tensor(a)
    _binary_shapes(a, b, "add")

    def bwd(g, a=a, b=b):
        if a.requires_grad or a._backward:
            _accumulate(a, g)
        if b.requires_grad or b._backward:
            _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _binary_shapes(a, b, "sub")

    def bwd(g, a=a, b=b):
        if a.requires_grad or a._backward:
            _accumulate(a, g)
        if b.requires_grad or b._backward:
            _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(as_tensor(a), float(b))
    if not isinstance(a, Tensor):
        return scale(b, float(a))
    _binary_shapes(a, b, "mul")

    def bwd(g, a=a, b=b):
        if a.requires_grad or a._backward:
            _accumulate(a, g * b.data)
        if b.requires_grad or b._backward:
            _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    _binary_shapes(a, b, "div")

    def bwd(g, a=a, b=b):
        if a.requires_grad or a._backward:
            _accumulate(a, g / b.data)
        if b.requires_grad or b._backward:
            _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (the constant is not differentiated)."""
    c = float(c)

    def bwd(g, a=a, c=c):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), bwd)


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; the subgradient at 0 is 0."""
    sign = np.sign(a.data)

    def bwd(g, a=a, sign=sign):
        _accumulate(a, g * sign)

    return _make(np.abs(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bwd(g, a=a, mask=mask):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g, a=a, out_data=out_data):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g, a=a):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g, a=a, out_data=out_data):
        _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient is zero where the clip is active."""
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g, a=a, mask=mask):
        _accumulate(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    x = np.ascontiguousarray(a.data)

    def bwd(g, a=a, x=x):
        _accumulate(a, backend.gelu_vjp(x, np.ascontiguousarray(g)))

    return _make(backend.gelu(x), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and structure ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")

    def bwd(g, a=a, b=b):
        if a.requires_grad or a._backward:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad or b._backward:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")

    def bwd(g, a=a):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bwd(g, a=a, old=old):
        _accumulate(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def bwd_all(g, a=a):
            _accumulate(a, np.full(a.shape, float(g.reshape(()))))

        return _make(np.asarray(a.data.sum()), (a,), bwd_all)

    ax = _check_axis(a, axis, "sum")

    def bwd(g, a=a, ax=ax):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, ax), a.shape).copy())

    return _make(a.data.sum(axis=ax), (a,), bwd)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along ``axis``; rejects empty axes."""
    ax = _check_axis(a, axis, "mean_pool")
    n = a.shape[ax]
    if n == 0:
        raise ShapeError(f"mean_pool: axis {axis} of shape {a.shape} is empty")
    return scale(tsum(a, ax), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Juxtapose tensors along ``axis``; the gradient splits back to parts."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero parts")
    ax = _check_axis(parts[0], axis, "concat")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            i != ax and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat: off-axis shapes differ, {parts[0].shape} vs {p.shape}"
            )
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, parts=parts, ax=ax, offsets=offsets):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p._backward:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by integer index, differentiably.

    Drives region extraction, half splits and token permutations; the
    backward pass scatter-adds, so repeated indices are allowed.
    """
    if a.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size == 0:
        raise ShapeError("take_rows: empty index")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise IndexError(
            f"take_rows: index out of range [0, {a.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )

    def bwd(g, a=a, idx=idx):
        acc = np.zeros(a.shape)
        backend.scatter_add_rows(acc, idx, np.ascontiguousarray(g))
        _accumulate(a, acc)

    return _make(a.data[idx].copy(), (a,), bwd)


def gather_flat(a: Tensor, idx) -> Tensor:
    """Gather from the row-major flattening of ``a`` into ``idx.shape``."""
    idx = np.asarray(idx, dtype=np.int64)
    flat = a.data.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise IndexError(f"gather_flat: index out of range [0, {flat.size})")

    def bwd(g, a=a, idx=idx):
        acc = np.zeros(a.data.size)
        backend.scatter_add_flat(
            acc, idx.reshape(-1), np.ascontiguousarray(g).reshape(-1)
        )
        _accumulate(a, acc.reshape(a.shape))

    return _make(flat[idx.reshape(-1)].reshape(idx.shape), (a,), bwd)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-m vector to every row of an n-by-m tensor."""
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g, a=a, b=b):
        if a.requires_grad or a._backward:
            _accumulate(a, g)
        if b.requires_grad or b._backward:
            _accumulate(b, g.sum(axis=0))

    return _make(a.data + b.data[None, :], (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization and loss primitives
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    ax = _check_axis(a, axis, "softmax")
    moved = np.ascontiguousarray(np.moveaxis(a.data, ax, -1))
    lead = moved.shape[:-1]
    rows = moved.reshape(-1, moved.shape[-1])
    y_rows = backend.softmax_rows(rows)

    def bwd(g, a=a, ax=ax, lead=lead, y_rows=y_rows):
        g_rows = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(y_rows.shape)
        gx_rows = backend.softmax_rows_vjp(y_rows, g_rows)
        gx = np.moveaxis(gx_rows.reshape(lead + (y_rows.shape[-1],)), -1, ax)
        _accumulate(a, np.ascontiguousarray(gx))

    y = np.moveaxis(y_rows.reshape(lead + (rows.shape[-1],)), -1, ax).copy()
    return _make(y, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization with learned scale and shift."""
    if a.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D tensor, got {a.shape}")
    if gamma.shape != (a.shape[1],) or beta.shape != (a.shape[1],):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({a.shape[1]},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    x = np.ascontiguousarray(a.data)
    y, xhat, rstd = backend.layer_norm_rows(x, gamma.data, beta.data, eps)

    def bwd(g, a=a, gamma=gamma, beta=beta, xhat=xhat, rstd=rstd):
        gx, ggamma, gbeta = backend.layer_norm_rows_vjp(
            xhat, rstd, gamma.data, np.ascontiguousarray(g)
        )
        if a.requires_grad or a._backward:
            _accumulate(a, gx)
        if gamma.requires_grad or gamma._backward:
            _accumulate(gamma, ggamma)
        if beta.requires_grad or beta._backward:
            _accumulate(beta, gbeta)

    return _make(y, (a, gamma, beta), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-D logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: need {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    nll = (lse - z[np.arange(n), labels]).mean()
    probs = backend.softmax_rows(np.ascontiguousarray(z))

    def bwd(g, logits=logits, labels=labels, probs=probs, n=n):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        _accumulate(logits, gz * (float(g.reshape(())) / n))

    return _make(np.asarray(nll), (logits,), bwd)


def _check_axis(a: Tensor, axis: int, name: str) -> int:
    if not isinstance(axis, (int, np.integer)):
        raise ShapeError(f"{name}: axis must be an integer, got {axis!r}")
    ax = int(axis)
    if ax < 0:
        ax += a.ndim
    if ax < 0 or ax >= a.ndim:
        raise ShapeError(f"{name}: axis {axis} invalid for shape {a.shape}")
    return ax


# ---------------------------------------------------------------------------
# parameter helpers and the finite-difference oracle
# ---------------------------------------------------------------------------

def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def randn_param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape))


def zeros_param(shape) -> Tensor:
    return parameter(np.zeros(shape))


def ones_param(shape) -> Tensor:
    return parameter(np.ones(shape))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one probe per entry.

    Independent of the autograd machinery by construction: ``f`` is called on
    plain perturbed copies and only its float value is used.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_grad: eps must be positive, got {eps}")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(base.copy())))
        flat[i] = orig - eps
        lo = float(f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case elementwise relative difference with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
