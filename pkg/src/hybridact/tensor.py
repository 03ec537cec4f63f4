"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

The graph is recorded implicitly: every op whose inputs include a tensor
with ``requires_grad`` stores a backward closure on its result. Calling
``backward()`` on a scalar loss topologically sorts the graph and
accumulates gradients into ``.grad`` buffers (accumulate, never overwrite,
so repeated backward calls without zeroing add up).

Values default to float32; tests construct float64 tensors for tight
tolerances. A single graph is not thread-safe, but independent graphs
share no state and may run on separate threads.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


def _shape_err(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(np.shape(a))} and {tuple(np.shape(b))}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may be a view into another node's buffer
            self.grad = np.array(g, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Backpropagate from a scalar; gradients accumulate into leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        # Propagate this pass in isolation, then fold into gradients left by
        # earlier passes so repeated backward calls accumulate correctly.
        prior = []
        for node in topo:
            if node.grad is not None:
                prior.append((node, node.grad))
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node, g in prior:
            if node.grad is None:
                node.grad = g
            else:
                node.grad = node.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise _shape_err("add", a.data, b.data) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data - b.data
    except ValueError:
        raise _shape_err("sub", a.data, b.data) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise _shape_err("mul", a.data, b.data) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data @ b.data
    except ValueError:
        raise _shape_err("matmul", a.data, b.data) from None

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2) if b.data.ndim > 1 else np.outer(g, b.data).reshape(a.shape)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.outer(a.data, g).reshape(b.shape)
            else:
                gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(data, (a,), backward)


def transpose(a: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] += g
            a._accumulate(buf)

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stable."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - inner))

    return _make(y, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    y = x * phi

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
            a._accumulate(g * (phi + x * pdf))

    return _make(y, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis with affine parameters.

    The epsilon sits inside the square root, so a constant row normalizes
    to exactly zero (pre-affine) instead of NaN.
    """
    x = a.data
    d = x.shape[-1]
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            a._accumulate(inv * (dxhat - s1 / d - xhat * s2 / d))

    return _make(y, (a, gamma, beta), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: table[V, d] indexed by an integer array of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table._accumulate(buf)

    return _make(data, (table,), backward)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _make(data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.shape).astype(a.data.dtype))

    return _make(data, (a,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of (pred - target)^2. Shapes must match exactly."""
    target = _as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise _shape_err("mse_loss", pred.data, target.data)
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def backward(g):
        scale = 2.0 * g / n
        if pred.requires_grad:
            pred._accumulate(scale * diff)
        if target.requires_grad:
            target._accumulate(-scale * diff)

    return _make(data, (pred, target), backward)


def cross_entropy_loss(logits: Tensor, targets, ignore=None) -> Tensor:
    """Mean negative log-softmax probability of targets over kept positions.

    logits: [N, V]; targets: int [N]; ignore: optional bool [N], True rows
    are excluded from the mean. Raises on out-of-range targets and when
    every position is ignored.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: logits must be 2D [N, V], got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise _shape_err("cross_entropy_loss", logits.data, targets)
    if ignore is None:
        keep = np.ones(n, dtype=bool)
    else:
        keep = ~np.asarray(ignore, dtype=bool)
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("cross_entropy_loss: all positions masked")
    kept_targets = targets[keep]
    if kept_targets.size and (kept_targets.min() < 0 or kept_targets.max() >= v):
        raise IndexError(f"cross_entropy_loss: target out of range [0, {v})")

    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + x.max(axis=-1)
    nll = lse[keep] - x[keep, kept_targets]
    data = np.asarray(nll.mean(), dtype=x.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(n), targets.clip(0, v - 1)] -= 1.0
            p[~keep] = 0.0
            logits._accumulate(g * p / n_keep)

    return _make(data, (logits,), backward)


def parameter(data, rng: np.random.Generator | None = None, scale: float = 0.02,
              dtype=DEFAULT_DTYPE) -> Tensor:
    """Trainable tensor; `data` may be a shape tuple (random init) or an array."""
    if isinstance(data, tuple):
        if rng is None:
            raise ValueError("parameter: rng required for random init")
        arr = rng.normal(0.0, scale, size=data)
    else:
        arr = data
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, dtype=dtype)
