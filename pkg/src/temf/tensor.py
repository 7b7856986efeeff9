"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors store row-major (C-contiguous) float64 arrays with an explicit
shape and an optional gradient buffer of the same shape. Every operation
below records the tensors it consumed plus a backward rule on its output,
so a scalar result can be differentiated by replaying the recorded
operations in reverse execution order (see :class:`Tape`).

Scope is deliberately small: no views, no striding tricks, broadcasting
only by repetition along leading axes (an operand whose shape is a suffix
of the other's shape is repeated). Everything runs on the CPU in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError


class Tensor:
    """A dense n-dimensional float64 array with a gradient slot.

    ``data`` is always C-contiguous, so ``data.ravel()`` is the row-major
    flat storage. ``grad`` is lazily allocated with the same shape when
    gradients first reach this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d to 1-d; 0-d is always contiguous
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A copy that shares no graph history (values are copied)."""
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def backward(self) -> "Tape":
        """Differentiate this scalar w.r.t. every reachable requires_grad leaf."""
        tape = Tape.from_output(self)
        tape.backward()
        return tape

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{flag}{nm})"


class Tape:
    """Ordered record of the operations that produced one output tensor.

    ``nodes`` holds the involved tensors in a valid execution order
    (inputs before outputs). ``backward`` seeds the output's gradient with
    ones and applies each recorded backward rule exactly once, in reverse
    order, accumulating into ``grad`` of every tensor that requires it.
    """

    def __init__(self, nodes: list[Tensor], output: Tensor):
        self.nodes = nodes
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order, output)

    def backward(self) -> None:
        out = self.output
        if out.size != 1:
            raise ContractError(f"backward() requires a scalar output, got shape {out.shape}")
        _accumulate(out, np.ones_like(out.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g)  # fresh buffer: g may be a view or read-only
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _suffix_shape(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _lead_axes(big: tuple[int, ...], small: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(range(len(big) - len(small)))


# ---------------------------------------------------------------------------
# elementwise operations


def _binary(a: Tensor, b: Tensor, op: str, fwd, da, db) -> Tensor:
    """Shared plumbing for add/sub/mul with leading-axis repetition."""
    if a.shape == b.shape:
        data = fwd(a.data, b.data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, da(g, a.data, b.data))
            if b.requires_grad:
                _accumulate(b, db(g, a.data, b.data))

    elif _suffix_shape(a.shape, b.shape):
        axes = _lead_axes(a.shape, b.shape)
        data = fwd(a.data, b.data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, da(g, a.data, b.data))
            if b.requires_grad:
                _accumulate(b, db(g, a.data, b.data).sum(axis=axes))

    elif _suffix_shape(b.shape, a.shape):
        axes = _lead_axes(b.shape, a.shape)
        data = fwd(a.data, b.data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, da(g, a.data, b.data).sum(axis=axes))
            if b.requires_grad:
                _accumulate(b, db(g, a.data, b.data))

    else:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal and "
                         "neither is a trailing suffix of the other")
    return _make(data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * np.broadcast_to(y, g.shape),
                   lambda g, x, y: g * np.broadcast_to(x, g.shape))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * s)

    return _make(x.data * s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * (1.0 - y * y))

    return _make(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is defined as 0.
    y = np.maximum(x.data, 0.0)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * (x.data > 0.0))

    return _make(y, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0. Caller gates on training."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape surgery


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(x.data.T), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty tensor list")
    ndim = tensors[0].data.ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} invalid for rank {ndim}")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != ndim or any(other[i] != base[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: off-axis dims differ, {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _make(data, tuple(tensors), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Slice ``x`` along ``axis`` into pieces of the given sizes."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {axis} of {x.shape}")
    pieces: list[Tensor] = []
    lo = 0
    for size in sizes:
        hi = lo + size
        index = [slice(None)] * x.data.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)

        def backward(g: np.ndarray, index=index) -> None:
            buf = np.zeros_like(x.data)
            buf[index] = g
            _accumulate(x, buf)

        pieces.append(_make(np.ascontiguousarray(x.data[index]), (x,), backward))
        lo = hi
    return pieces


def gather_rows(matrix: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a [V x D] matrix; backward scatter-adds into them."""
    idx = np.asarray(indices, dtype=np.int64)
    if matrix.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got shape {matrix.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= matrix.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {matrix.shape[0]} rows")

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(matrix.data)
        np.add.at(buf, idx, g)
        _accumulate(matrix, buf)

    return _make(matrix.data[idx], (matrix,), backward)


# ---------------------------------------------------------------------------
# normalization, reductions, losses


def _mask_along_axis(shape: tuple[int, ...], axis: int, mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != (shape[axis],):
        raise ShapeError(f"mask of shape {m.shape} does not match axis {axis} of {shape}")
    expand = [1] * len(shape)
    expand[axis] = shape[axis]
    return np.broadcast_to(m.reshape(expand), shape)


def softmax(x: Tensor, axis: int, mask=None) -> Tensor:
    """Stable softmax along ``axis``; masked positions get weight exactly 0.

    ``mask`` is a boolean vector over the softmax axis, shared by every
    slice; each slice must keep at least one unmasked position.
    """
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if mask is None:
        z = x.data
    else:
        m = _mask_along_axis(x.shape, axis, mask)
        if not m.any(axis=axis).all():
            raise ContractError("softmax: a slice has no unmasked positions")
        z = np.where(m, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - inner))

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization of a [c x D] tensor with learned affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expected a matrix, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=1, keepdims=True) \
                - xhat * (gh * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, term * inv)

    return _make(data, (x, gain, bias), backward)


def reduce_sum(x: Tensor, axis: int) -> Tensor:
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"sum: axis {axis} invalid for shape {x.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(x.data.sum(axis=axis), (x,), backward)


def reduce_mean(x: Tensor, axis: int) -> Tensor:
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"mean: axis {axis} invalid for shape {x.shape}")
    n = x.shape[axis]

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape) / n)

    return _make(x.data.mean(axis=axis), (x,), backward)


def max_pool(x: Tensor, axis: int, mask=None) -> Tensor:
    """Maximum along ``axis``; gradient routes to the first maximal position.

    With a mask, masked positions are excluded from the pool entirely.
    """
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"max_pool: axis {axis} invalid for shape {x.shape}")
    if mask is None:
        z = x.data
    else:
        m = _mask_along_axis(x.shape, axis, mask)
        if not m.any(axis=axis).all():
            raise ContractError("max_pool: a slice has no unmasked positions")
        z = np.where(m, x.data, -np.inf)
    arg = np.expand_dims(np.argmax(z, axis=axis), axis)
    data = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, arg, np.expand_dims(g, axis), axis=axis)
        _accumulate(x, buf)

    return _make(data, (x,), backward)


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Negative log-likelihood of the true class given a probability vector.

    ``target`` is a one-hot vector the same length as ``probs``. The picked
    probability is clamped at 1e-12 before the log; at the clamp the loss
    is treated as locally constant.
    """
    t = np.asarray(target, dtype=np.float64)
    if probs.data.ndim != 1 or t.shape != probs.shape:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs target {t.shape}")
    if not (np.all((t == 0.0) | (t == 1.0)) and t.sum() == 1.0):
        raise ContractError("cross_entropy: target must be one-hot")
    total = probs.data.sum()
    if abs(total - 1.0) > 1e-6:
        raise ContractError(f"cross_entropy: probabilities sum to {total!r}, not 1")
    p = float(probs.data @ t)
    clamped = max(p, 1e-12)

    def backward(g: np.ndarray) -> None:
        if p >= 1e-12:
            _accumulate(probs, -float(g) * t / clamped)

    return _make(np.float64(-np.log(clamped)), (probs,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences (no normalization)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, 2.0 * float(g) * diff)
        if b.requires_grad:
            _accumulate(b, -2.0 * float(g) * diff)

    return _make(np.float64((diff * diff).sum()), (a, b), backward)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
               max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None,
               atol: float = 0.0) -> float:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Returns the maximum relative error over the checked coordinates, where
    relative error is |g_a - g_n| / max(|g_a| + |g_n|, 1e-10). By default
    every coordinate of every parameter is perturbed; pass
    ``max_coords_per_param`` (with an ``rng``) to subsample coordinates of
    large parameters.

    A coordinate whose analytic and numeric gradients both fall below
    ``atol`` counts as agreement: central differences cannot resolve
    gradients under the evaluation noise floor (about eps_machine*|f|/eps),
    so for deep compositions a small ``atol`` is the honest way to treat
    such coordinates as zero. The default 0.0 applies the strict relative
    formula everywhere.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ContractError(f"grad_check: eps {eps} outside [1e-8, 1e-4]")
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise ContractError("grad_check: f() produced a non-finite value")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            if rng is None:
                raise ContractError("grad_check: coordinate sampling requires an rng")
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            hi = f().item()
            flat[i] = saved - eps
            lo = f().item()
            flat[i] = saved
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ContractError("grad_check: f() produced a non-finite value")
            numeric = (hi - lo) / (2.0 * eps)
            if abs(ga_flat[i]) <= atol and abs(numeric) <= atol:
                continue
            err = abs(ga_flat[i] - numeric) / max(abs(ga_flat[i]) + abs(numeric), 1e-10)
            worst = max(worst, float(err))
    return worst
