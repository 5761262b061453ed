"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation returns a new Tensor node whose
value is already computed and whose vector-Jacobian product is recorded as a
closure. Calling :func:`backward` on a scalar node walks the recorded graph
in reverse topological order and returns a map from node to accumulated
gradient. Nothing is mutated during backward, so parameter tensors can be
shared read-only between graphs evaluated on different threads.

All arithmetic is 64-bit. Broadcasting is deliberately restricted: the only
implicit broadcast is a right operand whose shape equals the left operand's
shape minus the leading batch axis (bias-add style), plus plain python
scalars.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class GraphError(RuntimeError):
    """Raised for invalid backward requests (non-scalar root, detached input)."""


class Tensor:
    """A graph node holding a float64 ndarray value.

    Leaf tensors are created directly; interior nodes are created by the
    operations in this module. ``requires_grad`` controls whether the node
    participates in backward; constants never accumulate gradient.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalars mean python ints/floats, never silent arrays.
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

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _node(data, parents, vjp) -> Tensor:
    """Wrap an op result, recording the backward rule only when needed."""
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _bias_broadcastable(a: Tensor, b: Tensor) -> bool:
    return a.data.ndim >= 1 and b.data.shape == a.data.shape[1:]


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return _node(a.data + float(b), (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.data.shape == b.data.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if _bias_broadcastable(a, b):
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError("add", a.data.shape, b.data.shape)


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return _node(a.data - float(b), (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.data.shape == b.data.shape:
        return _node(a.data - b.data, (a, b), lambda g: (g, -g))
    if _bias_broadcastable(a, b):
        return _node(a.data - b.data, (a, b), lambda g: (g, -g.sum(axis=0)))
    raise ShapeError("sub", a.data.shape, b.data.shape)


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        return _node(a.data * s, (a,), lambda g: (g * s,))
    b = as_tensor(b)
    if a.data.shape == b.data.shape:
        return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if _bias_broadcastable(a, b):
        return _node(a.data * b.data, (a, b),
                     lambda g: (g * b.data, (g * a.data).sum(axis=0)))
    raise ShapeError("mul", a.data.shape, b.data.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = stable_sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def log(x: Tensor) -> Tensor:
    """Natural log. Caller guarantees strictly positive input."""
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo=None, hi=None) -> Tensor:
    """Clamp values to [lo, hi]. Gradient is 1 strictly inside the interval
    and 0 at and outside the bounds."""
    x = as_tensor(x)
    if lo is None and hi is None:
        return _node(x.data.copy(), (x,), lambda g: (g,))
    val = np.clip(x.data, lo, hi)
    inside = np.ones(x.data.shape, dtype=bool)
    if lo is not None:
        inside &= x.data > lo
    if hi is not None:
        inside &= x.data < hi
    return _node(val, (x,), lambda g: (g * inside,))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        val = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.data.shape, shape) from None
    old = x.data.shape
    return _node(val, (x,), lambda g: (g.reshape(old),))


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all elements (axis=None, scalar result) or one axis."""
    x = as_tensor(x)
    if axis is None:
        shape = x.data.shape
        return _node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis
    expand = lambda g: np.broadcast_to(np.expand_dims(g, ax), x.data.shape).copy()
    return _node(x.data.sum(axis=ax), (x,), lambda g: (expand(g),))


def tmean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    shape = x.data.shape
    return _node(x.data.mean(), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def amax(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; on ties the gradient routes to the first maximum."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    val = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (dx,)

    return _node(val, (x,), vjp)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Gather conv patches into (B, C*kh*kw, oh*ow) columns."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, C, H, W = x.shape
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    cols = np.empty((B, C, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(B, C * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    """Scatter-add columns back to the (padded, then cropped) input grid."""
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    oh = (Hp - kh) // stride + 1
    ow = (Wp - kw) // stride + 1
    cols = cols.reshape(B, C, kh, kw, oh, ow)
    dx = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("conv2d", x.data.shape, w.data.shape)
    cout, cin, kh, kw = w.data.shape
    B, _, H, W = x.data.shape
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError("conv2d", x.data.shape, w.data.shape)
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeError("conv2d bias", b.data.shape, (cout,))

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2d = w.data.reshape(cout, cin * kh * kw)
    out = np.einsum("of,bfp->bop", w2d, cols).reshape(B, cout, oh, ow)
    if b is not None:
        out = out + b.data[None, :, None, None]

    x_shape = x.data.shape
    w_shape = w.data.shape

    def vjp(g):
        g2d = g.reshape(B, cout, oh * ow)
        dw = np.einsum("bop,bfp->of", g2d, cols).reshape(w_shape)
        dcols = np.einsum("of,bop->bfp", w2d, g2d)
        dx = _col2im(dcols, x_shape, kh, kw, stride, padding)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, vjp)


def maxpool2d(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Max pooling; ties route gradient to the first maximal element of the
    window in row-major order."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d", x.data.shape)
    stride = size if stride is None else stride
    B, C, H, W = x.data.shape
    if H < size or W < size:
        raise ShapeError("maxpool2d", x.data.shape, (size, size))
    oh = (H - size) // stride + 1
    ow = (W - size) // stride + 1
    win = np.empty((B, C, size * size, oh, ow), dtype=np.float64)
    k = 0
    for i in range(size):
        for j in range(size):
            win[:, :, k] = x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            k += 1
    idx = np.argmax(win, axis=2)
    out = np.take_along_axis(win, idx[:, :, None], axis=2).squeeze(2)
    x_shape = x.data.shape

    def vjp(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[:, :, None], g[:, :, None], axis=2)
        dx = np.zeros(x_shape, dtype=np.float64)
        k = 0
        for i in range(size):
            for j in range(size):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dwin[:, :, k]
                k += 1
        return (dx,)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# fused losses (numerically stable forms with hand-derived backward rules)
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over a batch of integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.data.shape, labels.shape)
    B, N = logits.data.shape
    if labels.min() < 0 or labels.max() >= N:
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {N})")
    y = labels.astype(np.int64)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    sumexp = np.exp(shifted).sum(axis=1)
    # group (m - z_y) so the uniform-logit case cancels exactly
    per = np.log(sumexp) + (m[:, 0] - z[np.arange(B), y])
    val = per.mean()

    def vjp(g):
        p = np.exp(shifted) / sumexp[:, None]
        p[np.arange(B), y] -= 1.0
        return (g * p / B,)

    return _node(val, (logits,), vjp)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and fixed targets.

    Evaluated in the saturating softplus form, so finite logits can never
    produce a non-finite loss.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ShapeError("bce_with_logits", logits.data.shape, t.shape)
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    val = per.mean()
    n = z.size

    def vjp(g):
        return (g * (stable_sigmoid(z) - t) / n,)

    return _node(val, (logits,), vjp)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Elementwise logistic function without overflow on either tail."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> dict:
    """Run reverse-mode accumulation from a scalar root.

    Returns a map from every reachable requires-grad node to its gradient
    ndarray (same shape as the node's value). The graph itself is left
    untouched; repeated calls are independent.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return {root: np.ones_like(root.data)}

    # Iterative post-order over requires-grad nodes only. Nodes are marked
    # visited at expansion time (not push time), which keeps reverse
    # post-order a valid topological order on diamond-shaped graphs.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[Tensor, np.ndarray] = {root: np.ones_like(root.data)}
    for node in reversed(order):
        if node._vjp is None:
            continue
        g = grads[node]
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(parent)
            grads[parent] = pg if acc is None else acc + pg
    return grads


def grad_wrt_input(root: Tensor, inp: Tensor) -> np.ndarray:
    """Gradient of a scalar root with respect to one input node."""
    grads = backward(root)
    if inp not in grads:
        raise GraphError("input does not participate in the root's computation")
    return grads[inp]
