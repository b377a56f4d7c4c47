"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every op returns a new :class:`Tensor`; when any input requires grad the
result keeps references to its parents and a closure that maps the output
gradient to input gradients. :func:`backward` walks the graph once in
reverse topological order.

Spatial tensors are channels-last: ``(B, D, H, W, C)``.
The project-wide activation is SiLU (smooth, so finite-difference gradient
checks never straddle a kink).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Inputs to an op have incompatible shapes."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced NaN/Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),), "silu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def binary_cross_entropy(prob: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities against {0,1} targets.

    Probabilities are clamped to ``[eps, 1 - eps]``; clamped entries pass no
    gradient.
    """
    y = as_tensor(target).data
    if y.shape != prob.shape:
        raise ShapeError(f"bce: prob {prob.shape} vs target {y.shape}")
    p = np.clip(prob.data, eps, 1.0 - eps)
    val = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    inside = (prob.data > eps) & (prob.data < 1.0 - eps)

    def back(g):
        d = (-(y / p) + (1.0 - y) / (1.0 - p)) / p.size
        return (g * d * inside,)

    return _make(np.asarray(val), (prob,), back, "bce")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean BCE of ``sigmoid(logits)`` against {0,1} targets, without clamping."""
    y = as_tensor(target).data
    x = logits.data
    if y.shape != x.shape:
        raise ShapeError(f"bce: logits {x.shape} vs target {y.shape}")
    val = np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x))))
    return _make(np.asarray(val), (logits,), lambda g: (g * (_sigmoid(x) - y) / x.size,), "bce_logits")


# ------------------------------------------------------------------ reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def masked_select(a: Tensor, mask) -> Tensor:
    """Flattened entries of ``a`` where the boolean ``mask`` is set."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError(f"masked_select: mask {m.shape} vs tensor {a.shape}")

    def back(g):
        full = np.zeros(a.shape)
        full[m] = g
        return (full,)

    return _make(a.data[m], (a,), back, "masked_select")


# --------------------------------------------------------------------- shaping

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last (channel) axis; leading dims must agree."""
    ts = [as_tensor(t) for t in tensors]
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: leading dims {t.shape[:-1]} vs {lead}")
    sizes = [t.shape[-1] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make(np.concatenate([t.data for t in ts], axis=-1), ts, back, "concat")


# ---------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``(m, k) @ (k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _conv_out(n: int, k: int, stride: int) -> int:
    if n % stride:
        raise ShapeError(f"conv3d: spatial size {n} not divisible by stride {stride}")
    return n // stride


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """``(B, D, H, W, C)`` -> ``(B * Do * Ho * Wo, k^3 * C)``, taps major, channel minor."""
    C = x.shape[4]
    if k == 1:
        return np.ascontiguousarray(x[:, ::stride, ::stride, ::stride, :]).reshape(-1, C)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    if stride > 1:
        win = win[:, ::stride, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(-1, k ** 3 * C)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3-D convolution, channels-last, zero padding ``k // 2``.

    x: ``(B, D, H, W, Cin)``; w: ``(k, k, k, Cin, Cout)`` with odd k;
    output ``(B, D/s, H/s, W/s, Cout)``. Every spatial dim must be divisible
    by the stride.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-D input and weight, got {x.shape}, {w.shape}")
    k = w.shape[0]
    if w.shape[:3] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be odd and cubic, got {w.shape[:3]}")
    if w.shape[3] != x.shape[4]:
        raise ShapeError(f"conv3d: weight expects {w.shape[3]} input channels, got {x.shape[4]}")
    if stride < 1:
        raise ShapeError("conv3d: stride must be >= 1")
    B, D, H, W, C = x.shape
    O = w.shape[4]
    Do, Ho, Wo = (_conv_out(n, k, stride) for n in (D, H, W))
    p = k // 2
    s = stride

    cols = _im2col(x.data, k, s)
    wm = w.data.reshape(-1, O)
    out = cols @ wm
    if b is not None:
        if b.shape != (O,):
            raise ShapeError(f"conv3d: bias shape {b.shape} != ({O},)")
        out += b.data
    out = out.reshape(B, Do, Ho, Wo, O)

    def back(g):
        gm = g.reshape(-1, O)
        gw = (cols.T @ gm).reshape(w.shape)
        if not x.requires_grad:
            gx = None
        elif s == 1:
            # transposed conv == conv with the spatially flipped, channel-swapped kernel
            wf = w.data[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3).reshape(-1, C)
            gx = (_im2col(g, k, 1) @ wf).reshape(x.shape)
        elif k == 1:
            gx = np.zeros(x.shape)
            gx[:, ::s, ::s, ::s, :] = (gm @ wm.T).reshape(B, Do, Ho, Wo, C)
        else:
            gcols = (gm @ wm.T).reshape(B, Do, Ho, Wo, k, k, k, C)
            gxp = np.zeros((B, D + 2 * p, H + 2 * p, W + 2 * p, C))
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[:, i:i + s * Do:s, j:j + s * Ho:s, l:l + s * Wo:s, :] += \
                            gcols[:, :, :, :, i, j, l, :]
            gx = gxp[:, p:p + D, p:p + H, p:p + W, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv3d")


def upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the three spatial axes."""
    if x.data.ndim != 5:
        raise ShapeError(f"upsample3d: expected 5-D input, got {x.shape}")
    f = int(factor)
    out = x.data
    for ax in (1, 2, 3):
        out = np.repeat(out, f, axis=ax)
    B, D, H, W, C = x.shape

    def back(g):
        return (g.reshape(B, D, f, H, f, W, f, C).sum(axis=(2, 4, 6)),)

    return _make(out, (x,), back, "upsample3d")


def depth_to_space(x: Tensor, factor: int = 2) -> Tensor:
    """Sub-voxel shuffle ``(B, D, H, W, C*f^3) -> (B, fD, fH, fW, C)``.

    Input channel ``((a * f + b) * f + c) * C + ch`` lands at spatial offset
    ``(a, b, c)`` inside each output block.
    """
    f = int(factor)
    if x.data.ndim != 5 or x.shape[4] % (f ** 3):
        raise ShapeError(f"depth_to_space: channels of {x.shape} not divisible by {f ** 3}")
    B, D, H, W, Cf = x.shape
    C = Cf // f ** 3
    out = x.data.reshape(B, D, H, W, f, f, f, C).transpose(0, 1, 4, 2, 5, 3, 6, 7)
    out = out.reshape(B, D * f, H * f, W * f, C)

    def back(g):
        g = g.reshape(B, D, f, H, f, W, f, C).transpose(0, 1, 3, 5, 2, 4, 6, 7)
        return (g.reshape(x.shape),)

    return _make(out, (x,), back, "depth_to_space")


# -------------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf in the graph.

    Leaves passed in ``leaves`` that the loss does not depend on receive a zero
    gradient instead of an error. The graph is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    reached: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(_topo(loss)):
            if node._backward is None:
                reached[id(node)] = node
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node.op}")
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
            node._parents = ()
            node._backward = None
    for leaf in leaves:
        reached.setdefault(id(leaf), leaf)
    for key, leaf in reached.items():
        g = grads.get(key)
        g = np.zeros(leaf.shape) if g is None else np.asarray(g).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
