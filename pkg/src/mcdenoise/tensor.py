"""Dense N-D float64 tensors with reverse-mode automatic differentiation.

Tensors are stored row-major (last dimension fastest), so for the
(B, C, H, W, D) convention used by the volumetric kernels the depth axis
is contiguous in memory. The op graph recorded during a forward pass is
the tape: ``backward`` visits it exactly once in reverse topological
order and accumulates gradients additively into every leaf that requested
them. Everything runs in float64; gradient checks need the headroom.
"""

import numpy as np

from .errors import ContractError, ShapeError


class Tensor:
    """A float64 array, an optional gradient buffer, and a backward rule.

    Leaf tensors (no parents) own their data; tensors produced by ops hold
    references to their parents and a closure implementing the chain rule.
    Values are immutable once created; training loops update leaf ``data``
    in place between steps and rebuild the graph every iteration.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # Leaves get a zero buffer up front so non-participating leaves
        # report a zero gradient after any backward pass.
        self.grad = (
            np.zeros(self.data.shape) if (self.requires_grad and not _parents) else None
        )
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return mean(self)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# -- creation ---------------------------------------------------------------


def _checked_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"extents must all be >= 1, got {shape}")
    return shape


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(_checked_shape(shape)), requires_grad=requires_grad)


def full(shape, value, requires_grad=False) -> Tensor:
    return Tensor(np.full(_checked_shape(shape), float(value)), requires_grad=requires_grad)


def from_values(shape, values, requires_grad=False) -> Tensor:
    """Tensor with explicit content, filled in row-major order."""
    shape = _checked_shape(shape)
    arr = np.asarray(values, dtype=np.float64).reshape(shape)
    return Tensor(arr, requires_grad=requires_grad)


def randn(shape, mean, std, rng: np.random.Generator, requires_grad=False) -> Tensor:
    """Normal samples drawn from a caller-supplied seeded generator."""
    shape = _checked_shape(shape)
    return Tensor(rng.normal(mean, std, size=shape), requires_grad=requires_grad)


# -- backward machinery ------------------------------------------------------


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros(t.data.shape)
    t.grad += g


def _topo_order(root: Tensor) -> list:
    """Parents-before-children ordering of the recorded op graph."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate additively across calls, so the backward of a sum
    of losses equals the sum of the individual backwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf():
        if loss.requires_grad:
            _accumulate(loss, np.ones(loss.data.shape))
        return
    order = _topo_order(loss)
    # Interior grads are scratch buffers for this traversal only; leaf
    # grads persist and keep accumulating.
    for node in order:
        if not node.is_leaf():
            node.grad = np.zeros(node.data.shape)
    loss.grad[...] = 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def _result(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise and reduction ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _result(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), _bw)


def scalar_mul(a: Tensor, s) -> Tensor:
    s = float(s)

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g * s)

    return _result(a.data * s, (a,), _bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), _bw)


def square(a: Tensor) -> Tensor:
    def _bw(g):
        if a.requires_grad:
            _accumulate(a, 2.0 * a.data * g)

    return _result(a.data * a.data, (a,), _bw)


def tensor_sum(a: Tensor) -> Tensor:
    def _bw(g):
        if a.requires_grad:
            _accumulate(a, np.full(a.data.shape, float(g.reshape(()))))

    return _result(np.array(a.data.sum()).reshape((1,)), (a,), _bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, np.full(a.data.shape, float(g.reshape(())) / n))

    return _result(np.array(a.data.mean()).reshape((1,)), (a,), _bw)


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate along the channel axis; all other extents must match."""
    tensors = list(tensors)
    if len(tensors) < 2:
        raise ContractError("concat needs at least two tensors")
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base):
            raise ContractError("concat: rank mismatch")
        for d in range(len(base)):
            if d != axis and t.shape[d] != base[d]:
                raise ContractError(
                    f"concat: non-channel extent mismatch {t.shape} vs {base}"
                )
    widths = [t.shape[axis] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


def pad_zeros(a: Tensor, amounts) -> Tensor:
    """Zero-pad by ``amounts[d]`` on both sides of every dimension."""
    amounts = tuple(int(p) for p in amounts)
    if len(amounts) != len(a.shape):
        raise ContractError(f"pad_zeros: need {len(a.shape)} amounts, got {len(amounts)}")
    if any(p < 0 for p in amounts):
        raise ContractError("pad_zeros: amounts must be >= 0")
    inner = tuple(slice(p, p + n) for p, n in zip(amounts, a.shape))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g[inner])

    return _result(np.pad(a.data, [(p, p) for p in amounts]), (a,), _bw)


def crop(a: Tensor, offsets, extents) -> Tensor:
    """Extract the box starting at ``offsets`` with the given extents."""
    offsets = tuple(int(o) for o in offsets)
    extents = tuple(int(e) for e in extents)
    if len(offsets) != len(a.shape) or len(extents) != len(a.shape):
        raise ContractError("crop: offsets/extents rank mismatch")
    for o, e, n in zip(offsets, extents, a.shape):
        if o < 0 or e < 1 or o + e > n:
            raise ContractError(
                f"crop: window offset {offsets} extent {extents} outside shape {a.shape}"
            )
    window = tuple(slice(o, o + e) for o, e in zip(offsets, extents))

    def _bw(g):
        if a.requires_grad:
            buf = np.zeros(a.data.shape)
            buf[window] = g
            _accumulate(a, buf)

    return _result(a.data[window].copy(), (a,), _bw)
