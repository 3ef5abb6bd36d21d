"""A small reverse-mode automatic differentiation engine on float64 numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :meth:`Tensor.backward` walks
the graph in reverse topological order. Gradients of leaf tensors accumulate
across calls until :func:`zero_grad` is used; intermediate gradients are
recomputed on every call.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy (trailing-axis) broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


broadcast_mul = mul


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return _make(r, (x,), lambda g: (g * 0.5 / r,))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) for i in parts)

    def bw(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    out = x.data.mean(axis=axis)
    n = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out, (x,), bw)


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), bw)



# ---------------------------------------------------------------- linear algebra


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated indices inside one operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts}: shapes {a.shape} and {b.shape} ({exc})") from None

    def bw(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in_features, out_features)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    y = _make(x.data @ weight.data, (x, weight), bw)
    return y if bias is None else add(y, bias)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernels, zero padding."""
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]  # (N, C, ho, wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gw = None
        if weight.requires_grad:
            gw = (g_nhwc.reshape(-1, o).T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            # column gradients ordered (kh, kw, c) so each kernel offset is a contiguous channel run
            w_r = weight.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
            gcols = (g_nhwc.reshape(-1, o) @ w_r).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph : ph + h, pw : pw + w, :].transpose(0, 3, 1, 2)
        return gx, gw

    y = _make(out, (x, weight), bw)
    return y if bias is None else add(y, reshape(bias, (1, o, 1, 1)))


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """(N, C, L) input, (O, C, k) kernels; implemented as a height-1 conv2d."""
    x = as_tensor(x)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, length = x.shape
    o, _, k = weight.shape
    y = conv2d(reshape(x, (n, c, 1, length)), reshape(weight, (o, c, 1, k)), None, 1, (0, padding))
    y = reshape(y, (n, o, y.shape[-1]))
    return y if bias is None else add(y, reshape(bias, (1, o, 1)))


# ---------------------------------------------------------------- losses


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label] (log-sum-exp stabilized)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    if z.shape[0] != labels.size:
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    logp = log_softmax_np(z)
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((g * p / labels.size).reshape(logits.shape),)

    return _make(loss, (logits,), bw)


def pairwise_l2(x: Tensor) -> Tensor:
    """Euclidean distances between rows: (..., N, D) -> (..., N, N).

    The gradient at zero distance is taken as zero (a valid subgradient).
    """
    d = x.data
    diff = d[..., :, None, :] - d[..., None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist > 0, g / dist, 0.0)
        coef = coef + np.swapaxes(coef, -1, -2)
        gx = (coef[..., None] * diff).sum(-2)
        return (gx,)

    return _make(dist, (x,), bw)


# ---------------------------------------------------------------- gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    indices: dict[int, Iterable[tuple]] | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``f`` recomputes a scalar loss from the current parameter values. Central
    differences are taken in place on each parameter's data.
    """
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for k, p in enumerate(params):
        coords = np.ndindex(*p.shape) if indices is None or k not in indices else indices[k]
        for idx in coords:
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = f().item()
            p.data[idx] = orig - eps
            down = f().item()
            p.data[idx] = orig
            num = (up - down) / (2 * eps)
            a = analytic[k][idx]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    zero_grad(params)
    return worst

