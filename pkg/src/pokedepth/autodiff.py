"""Small dense-tensor library with reverse-mode automatic differentiation.

Only the operations needed by the depth network and its objectives are
provided.  Tensors wrap a numpy array; every op that touches a tensor with
``requires_grad`` records its parents and a backward closure, and
:func:`backward` walks the recorded graph in reverse topological order.

Image tensors use ``(N, C, H, W)`` layout; a single ``(C, H, W)`` image is
accepted by the convolution ops and returned without the batch axis.
"""

from __future__ import annotations

import builtins
import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "Adam",
    "default_dtype",
    "get_default_dtype",
    "tensor",
    "parameter",
    "conv2d",
    "conv_transpose2d",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "exp",
    "log",
    "square",
    "clamp",
    "scale",
    "sum",
    "mean",
    "reshape",
    "gather_pixel",
    "gather_pixels",
    "crop_windows",
    "stop_gradient",
    "backward",
    "zero_grad",
]

_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an op receives a value outside its mathematical domain."""


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the floating-point type of newly created tensors.

    Gradient checks run under ``default_dtype(np.float64)`` so that finite
    differences are not swamped by single-precision rounding.
    """
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def _binary_operands(a, b):
    # Python scalars are folded in as constants; tensor pairs must match exactly.
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.full(a.shape, b))
    return Tensor(np.full(b.shape, a)), b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return scale(a, b)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return scale(b, a)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), "div", lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), "relu",
                   lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    bad = np.flatnonzero(~(a.data > 0))
    if bad.size:
        idx = np.unravel_index(bad[0], a.shape) if a.ndim else ()
        raise DomainError(f"log: non-positive value {a.data[idx]!r} at index {tuple(int(i) for i in idx)}")
    ad = a.data
    return _result(np.log(ad), (a,), "log", lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), "square", lambda g: (2 * g * ad,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), "sum",
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.size
    shape = a.shape
    return _result(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), "mean",
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity that cuts the graph: nothing flows back into ``a``."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "stop_gradient"
    return out


def gather_pixel(image: Tensor, row: int, col: int) -> Tensor:
    """Scalar value of an ``(H, W)`` map at ``(row, col)``."""
    if image.ndim != 2:
        raise ShapeError(f"gather_pixel expects an (H, W) map, got {image.shape}")
    h, w = image.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel ({row}, {col}) outside {h}x{w} map")
    dtype = image.data.dtype

    def grad_fn(g):
        full = np.zeros((h, w), dtype=dtype)
        full[row, col] = g
        return (full,)

    return _result(np.asarray(image.data[row, col], dtype=dtype), (image,), "gather", grad_fn)


def gather_pixels(maps: Tensor, rows, cols) -> Tensor:
    """Per-sample pixel lookup: ``out[i] = maps[i, rows[i], cols[i]]`` for ``(N, H, W)``."""
    if maps.ndim != 3:
        raise ShapeError(f"gather_pixels expects an (N, H, W) stack, got {maps.shape}")
    n, h, w = maps.shape
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != (n,) or cols.shape != (n,):
        raise ShapeError(f"need one pixel per map: {n} maps, {rows.shape} rows, {cols.shape} cols")
    if np.any((rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)):
        i = int(np.flatnonzero((rows < 0) | (rows >= h) | (cols < 0) | (cols >= w))[0])
        raise IndexError(f"pixel ({rows[i]}, {cols[i]}) of sample {i} outside {h}x{w} map")
    idx = np.arange(n)
    dtype = maps.data.dtype

    def grad_fn(g):
        full = np.zeros((n, h, w), dtype=dtype)
        full[idx, rows, cols] = g
        return (full,)

    return _result(maps.data[idx, rows, cols], (maps,), "gather", grad_fn)


def crop_windows(x: Tensor, rows0, cols0, height: int, width: int) -> Tensor:
    """Per-sample windows ``x[i, :, r0:r0+height, c0:c0+width]`` of an ``(N, C, H, W)`` stack.

    Window positions outside the map read as zero, matching zero padding.
    """
    if x.ndim != 4:
        raise ShapeError(f"crop_windows expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    rows0 = np.asarray(rows0, dtype=np.intp)
    cols0 = np.asarray(cols0, dtype=np.intp)
    pad_r = max(0, -int(rows0.min()), int(rows0.max()) + height - h)
    pad_c = max(0, -int(cols0.min()), int(cols0.max()) + width - w)
    rr = (rows0 + pad_r)[:, None, None] + np.arange(height)[None, :, None]
    cc = (cols0 + pad_c)[:, None, None] + np.arange(width)[None, None, :]
    nn = np.arange(n)[:, None, None]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_r, pad_r), (pad_c, pad_c))) if pad_r or pad_c else x.data
    out = np.ascontiguousarray(xp[nn, :, rr, cc].transpose(0, 3, 1, 2))

    def grad_fn(g):
        full = np.zeros((n, c, h + 2 * pad_r, w + 2 * pad_c), dtype=g.dtype)
        # windows of one sample never overlap themselves, so plain assignment is exact
        full[nn, :, rr, cc] = g.transpose(0, 2, 3, 1)
        return (full[:, :, pad_r:pad_r + h, pad_c:pad_c + w],)

    return _result(out, (x,), "crop", grad_fn)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int, ho: int, wo: int, padding: int):
    # cols: (N*ho*wo, C*k*k) scattered back onto an (N, C, H, W) canvas.
    # Accumulating channels-last with contiguous blocks is ~2x faster than NCHW.
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    canvas = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    blocks = np.ascontiguousarray(cols.reshape(n, ho, wo, c, k, k).transpose(4, 5, 0, 1, 2, 3))
    for i in range(k):
        for j in range(k):
            canvas[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += blocks[i, j]
    if padding:
        canvas = canvas[:, padding:padding + h, padding:padding + w, :]
    return np.ascontiguousarray(canvas.transpose(0, 3, 1, 2))


def _batched(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected (C, H, W) or (N, C, H, W) input, got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with a ``(C_out, C_in, k, k)`` kernel."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    xb, squeeze = _batched(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    n, c, h, w = xb.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {c_in}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: {h}x{w} input too small for {k}x{k} kernel with padding {padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")

    cols, ho, wo = _im2col(xb.data, k, stride, padding)
    wmat = kernel.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = gw = gb = None
        if xb.requires_grad:
            gx = _col2im(gmat @ wmat, (n, c, h, w), k, stride, ho, wo, padding)
        if kernel.requires_grad:
            gw = (gmat.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    result = _result(out, parents, "conv2d", grad_fn)
    return reshape(result, result.shape[1:]) if squeeze else result


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int | None = None) -> Tensor:
    """Transposed convolution with a ``(C_in, C_out, k, k)`` kernel.

    Output size is ``(H - 1) * stride - 2 * padding + k``.  ``padding``
    defaults to ``(k - stride) // 2``, so a kernel of size ``2 * stride``
    exactly multiplies the spatial dims by ``stride``.
    """
    if stride < 1:
        raise ValueError(f"conv_transpose2d: need stride >= 1, got {stride}")
    xb, squeeze = _batched(x, "conv_transpose2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv_transpose2d: kernel must be (C_in, C_out, k, k), got {kernel.shape}")
    c_in, c_out, k, _ = kernel.shape
    if padding is None:
        padding = (k - stride) // 2
    n, c, h, w = xb.shape
    if c != c_in:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but kernel expects {c_in}")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if padding < 0 or ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: invalid geometry k={k}, stride={stride}, padding={padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d: bias must have shape ({c_out},), got {bias.shape}")

    xmat = xb.data.transpose(0, 2, 3, 1).reshape(-1, c_in)
    wmat = kernel.data.reshape(c_in, -1)
    out = _col2im(xmat @ wmat, (n, c_out, ho, wo), k, stride, h, w, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        cols, _, _ = _im2col(g, k, stride, padding)
        gx = gw = gb = None
        if xb.requires_grad:
            gx = np.ascontiguousarray((cols @ wmat.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            gw = (xmat.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    result = _result(out, parents, "conv_transpose2d", grad_fn)
    return reshape(result, result.shape[1:]) if squeeze else result


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add to whatever is already stored, so call :func:`zero_grad`
    between optimisation steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.data.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params) -> None:
    for p in _iter_params(params):
        p.grad = None


def _iter_params(params) -> Iterator[Tensor]:
    if isinstance(params, dict):
        yield from params.values()
    else:
        yield from params


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimiser with bias correction.

    Parameters are updated in place.  A step is refused (and nothing is
    modified) if any gradient is non-finite.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = dict(params) if isinstance(params, dict) else dict(enumerate(params))
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        grads = {}
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter has {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {k!r}; step aborted")
            grads[k] = g
        if self.max_grad_norm is not None:
            total = np.sqrt(builtins.sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
            if total > self.max_grad_norm:
                factor = self.max_grad_norm / total
                grads = {k: g * factor for k, g in grads.items()}

        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

