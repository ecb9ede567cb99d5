"""Small reverse-mode autodiff engine over numpy arrays.

Tensors are NCHW, row-major. Binary elementwise ops require identical
shapes (or a python scalar); the only broadcasting patterns are the bias adds
inside ``conv2d``/``fully_connected`` and ``scale_channels``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


class NumericError(FloatingPointError):
    """Raised when a value becomes non-finite."""


_local = threading.local()
_DTYPES = {32: np.float32, 64: np.float64}
_precision_bits = 32


def set_precision(bits: int) -> None:
    """Select the default float width for new tensors (32 or 64)."""
    global _precision_bits
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    _precision_bits = bits


def get_dtype():
    return _DTYPES[_precision_bits]


@contextlib.contextmanager
def precision(bits: int):
    old = _precision_bits
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


# Tests flip this on so every op output is screened for NaN/Inf.
CHECK_FINITE = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # --- plumbing -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # --- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as a graph node.

    ``backward_fn(g)`` receives the upstream gradient and returns one gradient
    (or None) per parent. Custom fused ops in other modules use this too.
    """
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NumericError("operation produced non-finite values")
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def graph(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, loss.dtype)
    }
    for node in reversed(graph(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- elementwise ----------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        bad = [i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y]
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (axes {bad or 'rank'})")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "add")
        return record(a.data + b.data, (a, b), lambda g: (g, g))
    return record(a.data + a.dtype.type(b), (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "sub")
        return record(a.data - b.data, (a, b), lambda g: (g, -g))
    return record(a.data - a.dtype.type(b), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "mul")
        return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    s = a.dtype.type(b)
    return record(a.data * s, (a,), lambda g: (g * s,))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "div")
        out = a.data / b.data
        return record(out, (a, b), lambda g: (g / b.data, -g * out / b.data))
    s = a.dtype.type(b)
    return record(a.data / s, (a,), lambda g: (g / s,))


def square(a: Tensor) -> Tensor:
    return record(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def power(a: Tensor, p: float) -> Tensor:
    """``a**p`` for a >= 0; the derivative at 0 is taken as 0 when p > 1."""
    x = a.data
    out = np.power(x, p)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x, p - 1)
        d = np.where(x == 0, 0.0 if p > 1 else d, d).astype(x.dtype)
        return (g * d,)

    return record(out, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a: Tensor) -> Tensor:
    return record(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return record(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record(out, (a,), lambda g: (g * out * (1 - out),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = out == a.data
    return record(out, (a,), lambda g: (g * mask,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    _check_same(a, b, "maximum")
    pick_a = a.data >= b.data
    return record(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    _check_same(a, b, "minimum")
    pick_a = a.data <= b.data
    return record(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


# --- reductions and shape ops --------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum(), a.dtype), (a,), lambda g: (np.full(shape, g, a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return record(np.asarray(a.data.mean(), a.dtype), (a,), lambda g: (np.full(shape, g / n, a.dtype),))


def sum_axis(a: Tensor, axis: int | tuple, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def index(a: Tensor, key) -> Tensor:
    """numpy-style indexing (basic or advanced) with scatter-add backward."""
    out = a.data[key]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return record(np.array(out), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), bw)


# --- layers ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for x [N,D], weight [D,M], bias [M]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"fully_connected: input {x.shape} vs weight {weight.shape} (axis 1 vs 0)")
    out = x.data @ weight.data
    parents: tuple = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"fully_connected: bias {bias.shape} vs {weight.shape[1]} outputs")
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return record(out, parents, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and [Co,C,k,k] weight.

    Output size is ``floor((H + 2p - k)/stride) + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input channels (axis 1) {c} != weight channels (axis 1) {ci}")
    if k != k2 or k not in (1, 3):
        raise DimensionError(f"conv2d: kernel must be 1x1 or 3x3, got {k}x{k2} (axes 2,3)")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias {bias.shape} vs {co} output channels")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {h}x{w} too small for k={k}, padding={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if k == 1:
        win = xp[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        cols = win.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    w2 = weight.data.reshape(co, -1)
    out = cols @ w2.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = g2 @ w2
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if k == 1:
                gxp[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride] += (
                    gcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                )
            else:
                gcols = gcols.reshape(n, ho, wo, c, k, k)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = (gx, gw)
        return grads + (g2.sum(axis=0),) if bias is not None else grads

    return record(np.ascontiguousarray(out), parents, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W, keeping [N,C,1,1]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return record(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),))


def _pool_bounds(size: int, out: int) -> list[tuple[int, int]]:
    return [((j * size) // out, -((-(j + 1) * size) // out)) for j in range(out)]


def adaptive_max_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive max pooling; ties route the gradient to the lowest flat index."""
    if x.ndim != 4:
        raise DimensionError(f"adaptive_max_pool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise DimensionError(f"adaptive_max_pool: target {out_h}x{out_w} outside 1..{h} x 1..{w}")
    if h % out_h == 0 and w % out_w == 0:
        kh, kw = h // out_h, w // out_w
        blocks = x.data.reshape(n, c, out_h, kh, out_w, kw).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, out_h, out_w, kh * kw)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        rows = np.arange(out_h)[:, None] * kh + arg // kw
        cols = np.arange(out_w)[None, :] * kw + arg % kw
    else:
        out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
        rows = np.empty((n, c, out_h, out_w), dtype=np.intp)
        cols = np.empty_like(rows)
        for j, (r0, r1) in enumerate(_pool_bounds(h, out_h)):
            for l, (c0, c1) in enumerate(_pool_bounds(w, out_w)):
                win = x.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
                a = win.argmax(axis=-1)
                out[:, :, j, l] = np.take_along_axis(win, a[..., None], axis=-1)[..., 0]
                rows[:, :, j, l] = r0 + a // (c1 - c0)
                cols[:, :, j, l] = c0 + a % (c1 - c0)
    flat = (rows * w + cols).reshape(n, c, -1)

    def bw(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (ni[..., None], ci[..., None], flat), g.reshape(n, c, -1))
        return (gx.reshape(x.shape),)

    return record(np.ascontiguousarray(out), (x,), bw)


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour 2x upsampling, cropped to (out_h, out_w)."""
    n, c, h, w = x.shape
    if not (2 * h >= out_h and 2 * w >= out_w):
        raise DimensionError(f"upsample_nearest: {h}x{w} cannot reach {out_h}x{out_w} with factor 2")
    up = x.data.repeat(2, axis=2).repeat(2, axis=3)[:, :, :out_h, :out_w]

    def bw(g):
        full = np.zeros((n, c, 2 * h, 2 * w), dtype=g.dtype)
        full[:, :, :out_h, :out_w] = g
        return (full.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record(np.ascontiguousarray(up), (x,), bw)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x [N,C,H,W] by per-channel factors s [N,C,1,1]."""
    if s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise DimensionError(f"scale_channels: scale {s.shape} does not match {x.shape[:2]} + (1, 1)")
    return record(
        x.data * s.data,
        (x, s),
        lambda g: (g * s.data, (g * x.data).sum(axis=(2, 3), keepdims=True)),
    )


# --- gradient checking -----------------------------------------------------

def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    base = x.data.copy()
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            x.data = base
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    x.data = base
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` must be scalar-valued; ``x`` is perturbed in place and restored.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {y.shape}")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was
    numeric = numeric_grad(f, x, eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def parameters_checksum(params: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
