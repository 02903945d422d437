"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent. :func:`backward` orders the recorded graph topologically (the tape),
replays it in reverse once, accumulates into leaf ``grad`` buffers and then
releases the graph.

Arrays are float32 by default. Passing float64 arrays keeps the whole
computation in float64, which is what the finite-difference tests use.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

__all__ = [
    "Tensor",
    "ValidationError",
    "GraphConsumedError",
    "tensor",
    "parameter",
    "no_grad",
    "checked",
    "set_checked",
    "is_checked",
    "backward",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "layer_norm_channels",
    "pointwise",
    "conv2d",
    "linear",
    "grid_sample_bilinear",
    "bilinear_matrix",
    "avg_pool2x2",
    "reshape",
    "transpose",
    "concat",
    "take",
    "mean",
    "sum_all",
    "abs_",
]


class ValidationError(ValueError):
    """Raised when an operation receives non-finite or malformed input."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is replayed over an already released graph."""


_GRAD_ENABLED = True
_CHECKED = False


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_checked(flag: bool) -> None:
    """Turn NaN/Inf guards at operation boundaries on or off."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked(flag: bool = True):
    prev = _CHECKED
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    if not _CHECKED:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"{op}: non-finite values encountered")


class Tensor:
    """N-dimensional float array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self) -> None:
        backward(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _wrap(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast") from None


# -- tape replay --------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf that requires it, then release the graph.

    Gradients are added to existing buffers; callers zero them explicitly.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already ran on this graph; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.astype(node.data.dtype, copy=False)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


# -- pointwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else np.float32)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    _check_finite("add", out)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    _check_finite("sub", out)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(out, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data
    _check_finite("mul", out)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), grad_fn, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def abs_(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    return _result(out, (x,), lambda g: (g * np.sign(x.data),), "abs")


def layer_norm_channels(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-7) -> Tensor:
    """Normalize ``x`` of shape (N, C, H, W) over C at every spatial site."""
    if x.ndim != 4:
        raise ValueError(f"layer_norm_channels expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or offset.shape != (c,):
        raise ValueError(f"gain/offset must have shape ({c},), got {gain.shape} and {offset.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gv = gain.data.reshape(1, c, 1, 1)
    out = xhat * gv + offset.data.reshape(1, c, 1, 1)
    _check_finite("layer_norm_channels", out)

    def grad_fn(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        doffset = g.sum(axis=(0, 2, 3))
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, dgain, doffset

    return _result(out.astype(x.dtype, copy=False), (x, gain, offset), grad_fn, "layer_norm")


def pointwise(x: Tensor, kind: str, other: Tensor | None = None, gain=None, offset=None) -> Tensor:
    """Dispatch by name to one of the pointwise operators."""
    if kind == "add":
        return add(x, other)
    if kind == "mul":
        return mul(x, other)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "layer_norm_channels":
        return layer_norm_channels(x, gain, offset)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# -- shape ops ------------------------------------------------------------------

def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, grad_fn, "concat")


def take(x: Tensor, index: int) -> Tensor:
    """Select one item along the leading axis, dropping that axis."""
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(out), (x,), grad_fn, "take")


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; an axis of extent 1 is left unpooled.

    Odd trailing rows/columns are dropped, as in floor-mode pooling.
    """
    n, c, h, w = x.shape
    fy = 2 if h >= 2 else 1
    fx = 2 if w >= 2 else 1
    ho, wo = h // fy, w // fx
    crop = x.data[:, :, : ho * fy, : wo * fx]
    out = crop.reshape(n, c, ho, fy, wo, fx).mean(axis=(3, 5))

    def grad_fn(g):
        full = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, fy, axis=2), fx, axis=3) / (fy * fx)
        full[:, :, : ho * fy, : wo * fx] = spread
        return (full,)

    return _result(out.astype(x.dtype, copy=False), (x,), grad_fn, "avg_pool2x2")


# -- linear algebra -------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be 2-D, got {weight.shape}")
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ValueError(f"linear: input trailing extent {x.shape[-1]} != weight input dim {din}")
    if bias is not None and bias.shape != (dout,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({dout},)")
    _check_finite("linear", x.data)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, dout)
        x2 = x.data.reshape(-1, din)
        grads = [g @ weight.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, grad_fn, "linear")


def _im2col(x: np.ndarray, k: int, pad_mode: str = "zeros") -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*k*k) patches for a same-padded stride-1 window."""
    n, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="constant" if pad_mode == "zeros" else "edge")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int, pad_mode: str) -> np.ndarray:
    n, c, h, w = shape
    p = (k - 1) // 2
    d = dcols.reshape(n, h, w, c, k, k).transpose(0, 3, 4, 5, 1, 2)  # N, C, k, k, H, W
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + h, v : v + w] += d[:, :, u, v]
    if p and pad_mode == "edge":
        # replicated samples send their gradient back to the edge they copied
        dxp[:, :, p, :] += dxp[:, :, :p, :].sum(axis=2)
        dxp[:, :, p + h - 1, :] += dxp[:, :, p + h :, :].sum(axis=2)
        dxp[:, :, :, p] += dxp[:, :, :, :p].sum(axis=3)
        dxp[:, :, :, p + w - 1] += dxp[:, :, :, p + w :].sum(axis=3)
    return np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w])


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    padding: int | None = None,
    pad_mode: str = "zeros",
) -> Tensor:
    """Stride-1 cross-correlation with 'same' padding and an odd square kernel.

    ``pad_mode`` is ``"zeros"`` (default) or ``"edge"`` (replicate border).
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be (N, Cin, H, W), got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be (Cout, Cin, K, K), got {weight.shape}")
    cout, cin, k, _ = weight.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if padding is not None and padding != (k - 1) // 2:
        raise ValueError(f"conv2d supports only same padding {(k - 1) // 2}, got {padding}")
    if pad_mode not in ("zeros", "edge"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    _check_finite("conv2d", x.data, weight.data)
    n, _, h, w = x.shape
    if k == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    else:
        cols = _im2col(x.data, k, pad_mode)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        dw = (gmat.T @ cols).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = gmat @ wmat
            if k == 1:
                dx = np.ascontiguousarray(dcols.reshape(n, h, w, cin).transpose(0, 3, 1, 2))
            else:
                dx = _col2im(dcols, x.shape, k, pad_mode)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, parents, grad_fn, "conv2d")


# -- sampling -------------------------------------------------------------------

def _as_coords(coords) -> np.ndarray:
    arr = np.asarray(getattr(coords, "coords", coords), dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"coords must be (M, 2) pairs of (y, x), got {arr.shape}")
    return arr


def bilinear_matrix(coords, height: int, width: int, dtype=np.float32) -> sparse.csr_matrix:
    """Sparse (M, height*width) matrix of bilinear weights for ``coords``.

    Coordinates are clamped to the valid pixel-center range first.
    """
    c = _as_coords(coords)
    if not np.all(np.isfinite(c)):
        raise ValidationError("grid_sample: non-finite coordinates")
    m = c.shape[0]
    y = np.clip(c[:, 0], 0.0, height - 1)
    x = np.clip(c[:, 1], 0.0, width - 1)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    wy = y - y0
    wx = x - x0
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    rows = np.repeat(np.arange(m), 4)
    cols = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1).reshape(-1)
    vals = np.stack(
        [(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx], axis=1
    ).reshape(-1)
    keep = vals != 0
    mat = sparse.csr_matrix(
        (vals[keep].astype(dtype), (rows[keep], cols[keep])), shape=(m, height * width)
    )
    return mat


def grid_sample_bilinear(feature: Tensor, coords, weights: sparse.csr_matrix | None = None) -> Tensor:
    """Sample a (C, H, W) feature map at (M, 2) pixel-frame coordinates -> (C, M).

    A precomputed ``bilinear_matrix`` may be passed to skip rebuilding it.
    """
    if feature.ndim != 3:
        raise ValueError(f"grid_sample expects a (C, H, W) feature, got {feature.shape}")
    c, h, w = feature.shape
    if weights is None:
        weights = bilinear_matrix(coords, h, w, feature.dtype)
    elif weights.shape[1] != h * w:
        raise ValueError(f"bilinear matrix spans {weights.shape[1]} texels, feature has {h * w}")
    _check_finite("grid_sample", feature.data)
    flat = feature.data.reshape(c, h * w)
    out = np.ascontiguousarray(weights.dot(flat.T).T).astype(feature.dtype, copy=False)

    def grad_fn(g):
        dflat = weights.T.dot(g.T).T
        return (np.ascontiguousarray(dflat).reshape(c, h, w).astype(feature.dtype, copy=False),)

    return _result(out, (feature,), grad_fn, "grid_sample")
