"""Dense tensors plus a recording tape for reverse-mode gradients.

A ``Tensor`` is a plain NumPy array (float32 by default, float64 in
verification mode).  Differentiable computations run against a ``Tape``:
parameters are registered on the tape, every primitive op appends one
record, and ``Tape.backward`` replays the records in exact reverse order
to fill one gradient slot per parameter.

All ops also accept raw arrays (and Python scalars) and then just compute
the forward value without recording, so the same model code serves both
training and plain evaluation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64

# Guard against 0/0 when normalizing exactly-zero vectors.
_NORM_FLOOR = 1e-30


def tensor(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a dense array in the library's working precision."""
    return np.asarray(data, dtype=dtype)


def check_finite(x, name: str = "tensor") -> Tensor:
    """Raise if ``x`` contains NaN or Inf; return it unchanged otherwise."""
    arr = x.value if isinstance(x, Node) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


class Node:
    """A tensor recorded on a tape, with a slot for its gradient."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: Tensor, tape: "Tape"):
        self.value = value
        self.grad: Tensor | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"

    # Arithmetic sugar; constants stay plain Python/NumPy values.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)


class Tape:
    """Ordered record of primitive ops plus a named-parameter registry.

    A tape is single-owner: one forward recording, one backward replay.
    Gradient slot shapes always equal the parameter shapes.
    """

    def __init__(self):
        self._records: list[tuple[Node, tuple[Node, ...], Callable]] = []
        self._params: dict[str, Node] = {}

    def parameter(self, name: str, value) -> Node:
        """Register a named parameter and return its node."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        node = Node(np.asarray(value), self)
        self._params[name] = node
        return node

    @property
    def parameters(self) -> dict[str, Node]:
        return dict(self._params)

    def record(self, value: Tensor, inputs: tuple[Node, ...], backward: Callable) -> Node:
        node = Node(value, self)
        self._records.append((node, inputs, backward))
        return node

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Node) -> dict[str, Tensor]:
        """Replay recorded ops in reverse and return per-parameter gradients.

        Parameters the loss never touched get zero gradients.
        """
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ValueError("loss must be a node recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for out, inputs, backward in reversed(self._records):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for node, grad in zip(inputs, grads):
                if grad is None:
                    continue
                node.grad = grad if node.grad is None else node.grad + grad
        return self.gradients()

    def gradients(self) -> dict[str, Tensor]:
        return {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in self._params.items()
        }


def _value(x):
    return x.value if isinstance(x, Node) else x


def _shape(x) -> tuple[int, ...]:
    return np.shape(_value(x))


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``grad`` down to ``shape`` (inverse of NumPy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _dispatch(out_value: Tensor, pairs: Sequence[tuple[object, Callable]]):
    """Record ``out_value`` if any arg is a node; otherwise return it raw.

    ``pairs`` holds (argument, pullback) for each differentiable argument.
    """
    live = [(a, pb) for a, pb in pairs if isinstance(a, Node)]
    if not live:
        return out_value
    tape = live[0][0].tape
    for a, _ in live[1:]:
        if a.tape is not tape:
            raise ValueError("cannot mix nodes from different tapes")
    inputs = tuple(a for a, _ in live)
    pullbacks = tuple(pb for _, pb in live)

    def backward(g):
        return [pb(g) for pb in pullbacks]

    return tape.record(out_value, inputs, backward)


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a, b):
    av, bv = _value(a), _value(b)
    return _dispatch(av + bv, [
        (a, lambda g: _unbroadcast(g, np.shape(av))),
        (b, lambda g: _unbroadcast(g, np.shape(bv))),
    ])


def sub(a, b):
    av, bv = _value(a), _value(b)
    return _dispatch(av - bv, [
        (a, lambda g: _unbroadcast(g, np.shape(av))),
        (b, lambda g: _unbroadcast(-g, np.shape(bv))),
    ])


def neg(a):
    av = _value(a)
    return _dispatch(-av, [(a, lambda g: -g)])


def mul(a, b):
    av, bv = _value(a), _value(b)
    return _dispatch(av * bv, [
        (a, lambda g: _unbroadcast(g * bv, np.shape(av))),
        (b, lambda g: _unbroadcast(g * av, np.shape(bv))),
    ])


def div(a, b):
    av, bv = _value(a), _value(b)
    return _dispatch(av / bv, [
        (a, lambda g: _unbroadcast(g / bv, np.shape(av))),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), np.shape(bv))),
    ])


def square(a):
    av = _value(a)
    return _dispatch(av * av, [(a, lambda g: g * (2.0 * av))])


def _swap_last(x: Tensor) -> Tensor:
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    av, bv = _value(a), _value(b)
    out = av @ bv

    def grad_a(g):
        ga = g @ _swap_last(bv)
        return _unbroadcast(ga, np.shape(av))

    def grad_b(g):
        gb = _swap_last(av) @ g
        return _unbroadcast(gb, np.shape(bv))

    return _dispatch(out, [(a, grad_a), (b, grad_b)])


def reshape(a, shape):
    av = _value(a)
    return _dispatch(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors np.sum
    av = _value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _dispatch(out, [(a, grad)])


def mean(a, axis=None):
    av = _value(a)
    count = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def relu(a):
    av = _value(a)
    return _dispatch(np.maximum(av, 0), [(a, lambda g: g * (av > 0))])


def elu(a):
    """Exponential linear unit with alpha = 1; derivative at 0 taken as 1."""
    av = _value(a)
    out = np.array(av, copy=True)
    neg_mask = av < 0
    out[neg_mask] = np.expm1(av[neg_mask])

    def grad(g):
        d = np.ones_like(av)
        d[neg_mask] = np.exp(av[neg_mask])
        return g * d

    return _dispatch(out, [(a, grad)])


def softmax_rows(a):
    """Row-wise softmax over the last axis, stabilized by row-max subtraction."""
    av = _value(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - inner)

    return _dispatch(out, [(a, grad)])


def vector_norm(a, keepdims: bool = False):
    """Euclidean norm over the last axis; zero vectors get zero gradient."""
    av = _value(a)
    n = np.sqrt((av * av).sum(axis=-1, keepdims=True))

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, -1)
        return g * (av / np.maximum(n, _NORM_FLOOR))

    out = n if keepdims else n[..., 0]
    return _dispatch(out, [(a, grad)])


# ---------------------------------------------------------------------------
# Structural primitives
# ---------------------------------------------------------------------------


def concat(parts: Iterable, axis: int = -1):
    parts = list(parts)
    values = [_value(p) for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        def grad(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(index)]

        return grad

    out = np.concatenate(values, axis=axis)
    return _dispatch(out, [(p, make_grad(i)) for i, p in enumerate(parts)])


def crop_rows(a, height: int):
    """Keep the first ``height`` entries of the second-to-last axis."""
    av = _value(a)

    def grad(g):
        full = np.zeros_like(av)
        full[..., :height, :] = g
        return full

    return _dispatch(av[..., :height, :], [(a, grad)])


def maxpool_pairs(a):
    """Max over non-overlapping pairs of rows (2x1 kernel, stride 2).

    A trailing odd row is dropped, matching valid pooling.
    """
    av = _value(a)
    rows = av.shape[-2]
    pairs = rows // 2
    if pairs == 0:
        raise ValueError(f"need at least 2 rows to pool, got {rows}")
    lead = av.shape[:-2]
    cols = av.shape[-1]
    windows = av[..., : 2 * pairs, :].reshape(lead + (pairs, 2, cols))
    out = windows.max(axis=-2)
    winners = windows.argmax(axis=-2)

    def grad(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, np.expand_dims(winners, -2), np.expand_dims(g, -2), axis=-2)
        full = np.zeros_like(av)
        full[..., : 2 * pairs, :] = gw.reshape(lead + (2 * pairs, cols))
        return full

    return _dispatch(out, [(a, grad)])


def gather_rows(table, ids, frozen_rows: tuple[int, ...] = ()):
    """Select rows of a 2-D table by integer id; ids may have any shape.

    Gradients scatter-add back into the table; rows listed in
    ``frozen_rows`` (e.g. the padding row) keep a zero gradient.
    """
    tv = _value(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ValueError(
            f"id out of range: table has {tv.shape[0]} rows, ids span "
            f"[{ids.min()}, {ids.max()}]"
        )

    def grad(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids, g)
        for row in frozen_rows:
            full[row] = 0
        return full

    return _dispatch(tv[ids], [(table, grad)])


def einsum(subscripts: str, a, b):
    """Two-operand einsum with reverse-mode support.

    Every index of each operand must appear in the output or in the other
    operand (no internal traces), which covers all contractions used here.
    """
    in_spec, out_spec = subscripts.replace(" ", "").split("->")
    a_spec, b_spec = in_spec.split(",")
    for spec, other in ((a_spec, b_spec), (b_spec, a_spec)):
        if len(set(spec)) != len(spec):
            raise ValueError(f"repeated index in operand spec {spec!r}")
        if not set(spec) <= set(other) | set(out_spec):
            raise ValueError(f"index of {spec!r} absent from {other!r} and {out_spec!r}")
    av, bv = _value(a), _value(b)
    out = np.einsum(subscripts, av, bv)
    return _dispatch(out, [
        (a, lambda g: np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, bv)),
        (b, lambda g: np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, av)),
    ])


def conv1d_valid(x, kernel, bias=None, stride: int = 1):
    """Valid 1-D convolution over token positions.

    ``x`` is ``[l, e]`` (or ``[batch, l, e]``), ``kernel`` is ``[f, e, n]``,
    ``bias`` is ``[n]`` or None.  Output row ``t``, channel ``o`` is
    ``sum_{i,j} x[t+i, j] * kernel[i, j, o] + bias[o]``.
    """
    if stride != 1:
        raise ValueError(f"only stride 1 is supported, got {stride}")
    xv, kv = _value(x), _value(kernel)
    f, ke, n = kv.shape
    length, width = xv.shape[-2], xv.shape[-1]
    if length < f:
        raise ValueError(f"input length {length} is shorter than kernel size {f}")
    if width != ke:
        raise ValueError(f"input width {width} does not match kernel width {ke}")
    steps = length - f + 1
    lead = xv.shape[:-2]
    # [..., steps, f*e] windows against a [f*e, n] kernel matrix.
    windows = np.swapaxes(
        np.lib.stride_tricks.sliding_window_view(xv, f, axis=-2), -1, -2
    ).reshape(lead + (steps, f * ke))
    kmat = kv.reshape(f * ke, n)
    out = windows @ kmat
    if bias is not None:
        bv = _value(bias)
        out = out + bv

    def grad_x(g):
        gw = (g @ kmat.T).reshape(lead + (steps, f, ke))
        full = np.zeros_like(xv)
        for i in range(f):
            full[..., i : i + steps, :] += gw[..., i, :]
        return full

    def grad_kernel(g):
        flat_w = windows.reshape(-1, f * ke)
        flat_g = g.reshape(-1, n)
        return (flat_w.T @ flat_g).reshape(f, ke, n)

    def grad_bias(g):
        return g.reshape(-1, n).sum(axis=0)

    pairs = [(x, grad_x), (kernel, grad_kernel)]
    if bias is not None:
        pairs.append((bias, grad_bias))
    return _dispatch(out, pairs)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params: dict[str, Tensor], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a dict of parameter nodes to a scalar node.  Everything runs
    in float64.  Returns the max over coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    arrays = {k: np.array(v, dtype=VERIFY_DTYPE) for k, v in params.items()}

    def evaluate() -> float:
        tape = Tape()
        nodes = {k: tape.parameter(k, v) for k, v in arrays.items()}
        out = f(nodes)
        return float(_value(out))

    tape = Tape()
    nodes = {k: tape.parameter(k, v.copy()) for k, v in arrays.items()}
    loss = f(nodes)
    analytic = tape.backward(loss)

    worst = 0.0
    for name, arr in arrays.items():
        a_grad = analytic[name]
        if not np.all(np.isfinite(a_grad)):
            raise ValueError(f"non-finite analytic gradient for {name!r}")
        flat = arr.ravel()
        numeric = np.zeros(arr.size, dtype=VERIFY_DTYPE)
        for i in range(arr.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = evaluate()
            flat[i] = saved - eps
            down = evaluate()
            flat[i] = saved
            numeric[i] = (up - down) / (2.0 * eps)
        if not np.all(np.isfinite(numeric)):
            raise ValueError(f"non-finite numeric gradient for {name!r}")
        a_flat = a_grad.ravel()
        rel = np.abs(a_flat - numeric) / (np.abs(a_flat) + np.abs(numeric) + 1e-12)
        worst = max(worst, float(rel.max()))
    return worst
