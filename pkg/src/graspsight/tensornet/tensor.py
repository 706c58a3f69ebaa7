"""Array-valued reverse-mode autodiff.

Each :class:`Tensor` wraps a numpy array and, when it was produced by an op,
remembers its parents and a closure that pushes ``self.grad`` back to them.
Graphs are built eagerly by the forward pass and released by ``backward``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import _kernels


class GraphError(RuntimeError):
    """Backward requested on a tensor that has no recorded forward graph."""


class ShapeError(ValueError):
    pass


DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: Sequence["Tensor"] = (), _backward: Optional[Callable[[np.ndarray], None]] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients to every tensor this one was computed from."""
        if self._backward is None and not self._parents:
            if not self.requires_grad:
                raise GraphError("backward() called on a tensor with no recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"implicit backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # release the graph as we go
            node._parents = ()
            node._backward = None

    # operator sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# shape ops -------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching N,H,W; got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data.transpose(0, 2, 3, 1),
                          b.data.astype(a.dtype, copy=False).transpose(0, 2, 3, 1)], axis=3)
    return _make(_nchw(out), (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def tile_vector_to_channels(v: Tensor, h: int, w: int) -> Tensor:
    """Broadcast an ``(N, D)`` batch of vectors to ``(N, D, h, w)`` constant planes."""
    if v.ndim != 2:
        raise ShapeError(f"tile_vector_to_channels expects (N, D), got {v.shape}")
    n, d = v.shape
    out = np.ascontiguousarray(np.broadcast_to(v.data[:, None, None, :], (n, h, w, d)))
    return _make(_nchw(out), (v,), lambda g: (g.sum(axis=(2, 3)),))


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice ``x[:, start:stop]`` of a 4-d tensor."""
    if x.ndim != 4 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"take_channels: cannot take [{start}:{stop}] from {x.shape}")
    n, c, h, w = x.shape
    out = _nchw(np.ascontiguousarray(_nhwc(x.data)[..., start:stop]))

    def back(g):
        full = np.zeros((n, h, w, c), dtype=x.dtype)
        full[..., start:stop] = _nhwc(g)
        return (_nchw(full),)

    return _make(out, (x,), back)


# layers ----------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped ``(out, in)``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape} are incompatible")
    out = x.data @ w.data.T + b.data

    def back(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, w, b), back)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv2d: (size {size} + 2*pad {pad} - k {k}) is not divisible by stride {stride}")
    return span // stride + 1


_CHUNK_BYTES = 1 << 20
_scratch_buffers: dict = {}


def _scratch(rows: int, cols: int, dtype) -> np.ndarray:
    """Reusable im2col buffer; fresh large allocations are slow to fault in."""
    key = np.dtype(dtype)
    buf = _scratch_buffers.get(key)
    if buf is None or buf.size < rows * cols:
        buf = np.empty(max(rows * cols, 1), dtype=key)
        _scratch_buffers[key] = buf
    return buf[:rows * cols].reshape(rows, cols)


# 4-d activations keep the logical [N,C,H,W] shape but are stored channels-last;
# ``_nhwc`` and ``_nchw`` move between the two views without copying when the
# memory already has that layout.


def _nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,k,k]`` plus bias, via im2col."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {f} filters")
    k = kh
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    xh = _nhwc(x.data)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1).reshape(f, k * k * c))
    if k == 1 and stride == 1 and not pad:
        return _pointwise_conv(x, xh, wmat, w, b)
    rows_per_image = ho * wo
    chunk = max(1, _CHUNK_BYTES // (rows_per_image * k * k * c * xh.itemsize))
    out = np.empty((n * rows_per_image, f), dtype=x.dtype)
    for s0 in range(0, n, chunk):
        s1 = min(n, s0 + chunk)
        cols = _scratch((s1 - s0) * rows_per_image, k * k * c, xh.dtype)
        _kernels.im2col_into(xh, s0, s1, k, stride, ho, wo, cols)
        np.matmul(cols, wmat.T, out=out[s0 * rows_per_image:s1 * rows_per_image])
    out += b.data

    def back(g):
        g2 = _nhwc(g).reshape(-1, f)
        gw = np.zeros((f, k * k * c), dtype=x.dtype)
        gb = _column_sum(g2)
        need_x = _needs_grad(x)
        gxh = np.zeros(xh.shape, dtype=x.dtype) if need_x else None
        for s0 in range(0, n, chunk):
            s1 = min(n, s0 + chunk)
            gc = g2[s0 * rows_per_image:s1 * rows_per_image]
            # patches are recomputed rather than kept alive between passes
            cols = _scratch((s1 - s0) * rows_per_image, k * k * c, xh.dtype)
            _kernels.im2col_into(xh, s0, s1, k, stride, ho, wo, cols)
            gw += gc.T @ cols
            if need_x:
                _kernels.col2im_add(gc @ wmat, s0, s1, k, stride, ho, wo, gxh)
        gw = gw.reshape(f, k, k, c).transpose(0, 3, 1, 2)
        if need_x:
            gxh = gxh[:, pad:pad + h, pad:pad + wd] if pad else gxh
        return (_nchw(gxh) if need_x else None), gw, gb

    return _make(_nchw(out.reshape(n, ho, wo, f)), (x, w, b), back)


def _column_sum(a: np.ndarray) -> np.ndarray:
    # much faster than a.sum(axis=0) for tall, narrow arrays
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def _pointwise_conv(x: Tensor, xh: np.ndarray, wmat: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    # a 1x1 convolution is a matmul over the channels-last pixel rows
    n, h, wd, c = xh.shape
    f = wmat.shape[0]
    x2 = xh.reshape(-1, c)
    out = x2 @ wmat.T + b.data

    def back(g):
        g2 = _nhwc(g).reshape(-1, f)
        gx = _nchw((g2 @ wmat).reshape(n, h, wd, c)) if _needs_grad(x) else None
        return gx, (g2.T @ x2).reshape(w.shape), _column_sum(g2)

    return _make(_nchw(out.reshape(n, h, wd, f)), (x, w, b), back)


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    xh = _nhwc(x.data)
    out, arg = _kernels.maxpool2x2_forward(xh)

    def back(g):
        # each window's gradient goes to its first maximal element only
        return (_nchw(_kernels.maxpool2x2_backward(_nhwc(g), arg)),)

    return _make(_nchw(out), (x,), back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[N,C,H,W]``."""
    n, c, h, w = x.shape
    xh = _nhwc(x.data)
    out = np.broadcast_to(xh[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def back(g):
        return (_nchw(_nhwc(g).reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))),)

    return _make(_nchw(out), (x,), back)


# losses ----------------------------------------------------------------------

PROB_CLAMP = 1e-7


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1-1e-7]."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"bce_loss: predictions {p.shape} vs labels {y.shape}")
    q = np.clip(p.data, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -(y * np.log(q) + (1 - y) * np.log1p(-q)).mean()
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1 - PROB_CLAMP)

    def back(g):
        return (g * inside * (q - y) / (q * (1 - q)) / p.data.size,)

    return _make(np.asarray(loss, dtype=p.dtype), (p,), back)


def mse_loss(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        return g * 2 * diff / n, -g * 2 * diff / n

    return _make(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), back)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
