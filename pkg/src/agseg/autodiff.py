"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as numpy arrays (float32 by default, float64 supported for
high-precision gradient oracles). Each operation records its inputs and a
backward closure on the output tensor; calling ``backward()`` on a scalar
walks the recorded graph in reverse topological order and accumulates
gradients into every tensor that needs them. The graph is rebuilt on every
forward pass (define-by-run).

Conventions baked in here and relied on by the tests:
  - conv2d is cross-correlation (no kernel flip).
  - reductions (conv sums, sum/mean) accumulate in float64 and cast back.
  - maxpool ties route the gradient to the first element in row-major
    window order.
  - broadcasting in add/mul is limited to python scalars and same-rank
    shapes with size-1 axes (covers channel bias vectors and single-channel
    attention maps).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "tlog",
    "powc",
    "clip",
    "tsum",
    "tmean",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "upsample_nearest",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array plus optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor.

        Repeated calls without clearing gradients add up.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent._needs_grad():
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg.astype(parent.data.dtype, copy=True)
                else:
                    acc += pg.astype(parent.data.dtype, copy=False)

    # operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p._needs_grad() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(sa, sb):
    if sa == sb:
        return
    if len(sa) != len(sb):
        raise ValueError(f"shapes {sa} and {sb} are not broadcast-compatible (rank mismatch)")
    for a, b in zip(sa, sb):
        if a != b and a != 1 and b != 1:
            raise ValueError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)


# elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.isscalar(b):
        data = a.data + a.data.dtype.type(b)

        def backward(g, a=a):
            return ((a, g),)

        return _make(data, (a,), backward)
    b = _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def backward(g, a=a, b=b):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = a.data.dtype.type(b)
        data = a.data * c

        def backward(g, a=a, c=c):
            return ((a, g * c),)

        return _make(data, (a,), backward)
    b = _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data * b.data

    def backward(g, a=a, b=b):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g, a=a):
        return ((a, g * (a.data > 0)),)

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # exp(-|x|) never overflows; both branches are exact rearrangements
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g, a=a, out=data):
        return ((a, g * out * (1.0 - out)),)

    return _make(data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g, a=a):
        return ((a, g / a.data),)

    return _make(data, (a,), backward)


def powc(a: Tensor, exponent: float) -> Tensor:
    """a ** exponent for a constant exponent (0**0 evaluates to 1)."""
    data = np.power(a.data, a.data.dtype.type(exponent))

    def backward(g, a=a, e=float(exponent)):
        if e == 0.0:
            return ((a, np.zeros_like(a.data)),)
        return ((a, g * e * np.power(a.data, a.data.dtype.type(e - 1.0))),)

    return _make(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g, a=a, inside=inside):
        return ((a, g * inside),)

    return _make(data, (a,), backward)


# reductions ----------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    data = np.asarray(np.sum(a.data, dtype=np.float64)).astype(a.data.dtype)

    def backward(g, a=a):
        return ((a, np.full(a.shape, g.reshape(-1)[0] if g.ndim else g, dtype=a.data.dtype)),)

    return _make(data, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(np.sum(a.data, dtype=np.float64) / n).astype(a.data.dtype)

    def backward(g, a=a, n=n):
        gv = g.reshape(-1)[0] if g.ndim else g
        return ((a, np.full(a.shape, gv / n, dtype=a.data.dtype)),)

    return _make(data, (a,), backward)


# spatial ops ---------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(N,C,H,W) -> (N*oh*ow, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for u in range(kh):
        u_max = u + stride * oh
        for v in range(kw):
            v_max = v + stride * ow
            col[:, :, u, v, :, :] = img[:, :, u:u_max:stride, v:v_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(col: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the image."""
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    col6 = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for u in range(kh):
        u_max = u + stride * oh
        for v in range(kw):
            v_max = v + stride * ow
            img[:, :, u:u_max:stride, v:v_max:stride] += col6[:, :, u, v, :, :]
    if pad:
        return img[:, :, pad:pad + h, pad:pad + w]
    return img


def _mm(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    # 64-bit accumulation regardless of working precision
    return (a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)).astype(out_dtype)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (Cout, Cin, kh, kw) kernels."""
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}")
    col, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(cout, -1)
    out = _mm(col, w2.T, x.data.dtype) + b.data
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g, x=x, w=w, b=b, col=col, w2=w2, meta=(n, cin, h, wd, kh, kw, stride, padding, oh, ow)):
        n, cin, h, wd, kh, kw, stride, padding, oh, ow = meta
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, g.shape[1])
        grads = []
        if x._needs_grad():
            dcol = _mm(g2, w2, np.float64)
            dx = _col2im(dcol, (n, cin, h, wd), kh, kw, stride, padding).astype(x.data.dtype)
            grads.append((x, dx))
        if w._needs_grad():
            dw = _mm(g2.T, col, w.data.dtype).reshape(w.shape)
            grads.append((w, dw))
        if b._needs_grad():
            grads.append((b, np.sum(g2, axis=0, dtype=np.float64).astype(b.data.dtype)))
        return grads

    return _make(out, (x, w, b), backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d: forward equals conv2d's input-gradient computation.

    Weight layout is (Cin, Cout, kh, kw), so the identity
    <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> holds for the same array w.
    """
    n, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv_transpose2d: input has {cin} channels but weight expects {cin_w}")
    if b.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("conv_transpose2d: stride must be >= 1")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"conv_transpose2d: output extent {oh}x{ow} is not positive")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    w2 = w.data.reshape(cin, -1)
    cols = _mm(x2, w2, x.data.dtype)
    out = _col2im(cols, (n, cout, oh, ow), kh, kw, stride, padding) + b.data.reshape(1, cout, 1, 1)

    def backward(g, x=x, w=w, b=b, x2=x2, w2=w2, meta=(n, cin, h, wd, kh, kw, stride, padding)):
        n, cin, h, wd, kh, kw, stride, padding = meta
        gcol, goh, gow = _im2col(g, kh, kw, stride, padding)  # positions == (h, wd)
        grads = []
        if x._needs_grad():
            dx2 = _mm(gcol, w2.T, x.data.dtype)
            grads.append((x, dx2.reshape(n, h, wd, cin).transpose(0, 3, 1, 2)))
        if w._needs_grad():
            dw = _mm(x2.T, gcol, w.data.dtype).reshape(w.shape)
            grads.append((w, dw))
        if b._needs_grad():
            grads.append((b, np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(b.data.dtype)))
        return grads

    return _make(out, (x, w, b), backward)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Window maximum; gradient goes to the first argmax in row-major order."""
    stride = window if stride is None else stride
    n, c, h, wd = x.shape
    if window > h or window > wd:
        raise ValueError(f"maxpool2d: window {window} exceeds spatial extents {h}x{wd}")
    if stride < 1:
        raise ValueError("maxpool2d: stride must be >= 1")
    oh = (h - window) // stride + 1
    ow = (wd - window) // stride + 1
    patches = np.empty((n, c, oh, ow, window * window), dtype=x.data.dtype)
    for u in range(window):
        for v in range(window):
            patches[:, :, :, :, u * window + v] = x.data[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
    arg = np.argmax(patches, axis=4)  # first occurrence on ties
    out = np.take_along_axis(patches, arg[..., None], axis=4)[..., 0]

    def backward(g, x=x, arg=arg, meta=(n, c, h, wd, window, stride, oh, ow)):
        n, c, h, wd, window, stride, oh, ow = meta
        dx = np.zeros((n, c, h, wd), dtype=x.data.dtype)
        ni, ci, ii, ji = np.indices((n, c, oh, ow))
        rows = ii * stride + arg // window
        cols = ji * stride + arg % window
        np.add.at(dx, (ni, ci, rows, cols), g)
        return ((x, dx),)

    return _make(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; backward sums the replicas."""
    if factor < 1:
        raise ValueError("upsample_nearest: factor must be >= 1")
    if factor == 1:
        data = x.data.copy()

        def backward_id(g, x=x):
            return ((x, g),)

        return _make(data, (x,), backward_id)
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g, x=x, f=factor):
        n, c, h, wd = x.shape
        return ((x, g.reshape(n, c, h, f, wd, f).sum(axis=(3, 5), dtype=np.float64).astype(x.data.dtype)),)

    return _make(data, (x,), backward)
