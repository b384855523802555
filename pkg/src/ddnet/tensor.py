"""Dense tensors, the differentiable array operations the networks are built
from, a reverse-mode gradient engine, and a central-difference oracle.

Every operation takes and returns :class:`Tensor`. When gradient recording is
enabled and at least one input requires a gradient, the output keeps a
reference to its inputs and a closure mapping the output gradient to input
gradients. :func:`backward` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

MAX_RANK = 5

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf would escape an operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction is enough: any NaN/Inf poisons the sum
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{what}: non-finite values")


class Tensor:
    """An n-dimensional float array (rank <= 5) with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float64
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    dims = shape

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

    def __repr__(self) -> str:
        return f"Tensor(dims={self.shape}, dtype={self.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, attaching the graph edge when needed."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# reverse-mode engine
# ---------------------------------------------------------------------------

def _topological(seed: Tensor) -> list:
    order, seen = [], set()
    stack = [(seed, False)]
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


def backward(seed: Tensor) -> list:
    """Accumulate d(seed)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the leaves that received a gradient, in discovery order.
    """
    if seed.size != 1:
        raise ShapeError(f"backward seed must be scalar, got dims {seed.shape}")
    if not seed.requires_grad:
        return []
    order = _topological(seed)
    pending = {id(seed): np.ones_like(seed.data)}
    leaves = []
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node._op}: gradient dims {pg.shape} != value dims {parent.shape}")
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return leaves


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``h`` may be a scalar or an array; the default is ``1e-5 * (1 + |x|)``.
    """
    x = np.array(x, dtype=np.float64)
    steps = 1e-5 * (1.0 + np.abs(x)) if h is None else np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    grad = np.zeros_like(x)
    flat, gflat, hflat = x.reshape(-1), grad.reshape(-1), np.asarray(steps).reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + hflat[i]
        fp = float(f(x))
        flat[i] = orig - hflat[i]
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * hflat[i])
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def _same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dims {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    _same_dims(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    a = as_tensor(a)
    _same_dims(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    a = as_tensor(a)
    _same_dims(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, alpha: float) -> Tensor:
    return _result(x.data * alpha, (x,), lambda g: (g * alpha,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.size)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    shape = x.shape
    return _result(x.data.reshape(dims), (x,), lambda g: (g.reshape(shape),), "reshape")


def transpose_last(x: Tensor) -> Tensor:
    """Swap the two trailing axes."""
    if x.ndim < 2:
        raise ShapeError("transpose_last needs rank >= 2")
    y = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return _result(y, (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    try:
        y = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for k in range(len(xs)):
            idx[axis] = slice(bounds[k], bounds[k + 1])
            parts.append(np.ascontiguousarray(g[tuple(idx)]))
        return parts

    return _result(y, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    for t in xs[1:]:
        _same_dims(xs[0], t, "stack")
    y = np.stack([t.data for t in xs], axis=axis)

    def bw(g):
        return [np.ascontiguousarray(np.take(g, k, axis=axis)) for k in range(len(xs))]

    return _result(y, xs, bw, "stack")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[idx]), (x,), bw, "slice")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of the two trailing axes."""
    y = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    *lead, h, w = x.shape

    def bw(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _result(y, (x,), bw, "upsample2")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Convolution geometry.

    ``pad`` of ``None`` means "same" output size at stride 1 and no padding at
    stride 2 (the 2x2 stride-2 kernels tile the input exactly).
    """

    stride: int = 1
    dilation: int = 1
    padding: str = "zero"
    depthwise: bool = False
    pad: Optional[int] = None

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding not in ("zero", "replicate"):
            raise ValueError(f"padding must be 'zero' or 'replicate', got {self.padding!r}")

    def pads(self, kh: int, kw: int) -> tuple:
        """(top, bottom, left, right) padding for a kh x kw kernel."""
        if self.pad is not None:
            return (self.pad,) * 4
        if self.stride != 1:
            return (0, 0, 0, 0)
        eh, ew = self.dilation * (kh - 1), self.dilation * (kw - 1)
        return (eh // 2, eh - eh // 2, ew // 2, ew - ew // 2)


def _pad(x: np.ndarray, pads: tuple, mode: str) -> np.ndarray:
    t, b, l, r = pads
    if not any(pads):
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    return np.pad(x, width, mode="edge" if mode == "replicate" else "constant")


def _unpad(g: np.ndarray, pads: tuple, mode: str, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_pad`."""
    t, b, l, r = pads
    if not any(pads):
        return g
    if mode == "replicate":
        g = g.copy()
        if t:
            g[..., t, :] += g[..., :t, :].sum(axis=-2)
        if b:
            g[..., t + h - 1, :] += g[..., t + h:, :].sum(axis=-2)
        if l:
            g[..., :, l] += g[..., :, :l].sum(axis=-1)
        if r:
            g[..., :, l + w - 1] += g[..., :, l + w:].sum(axis=-1)
    return np.ascontiguousarray(g[..., t:t + h, l:l + w])


def _out_extent(n: int, p0: int, p1: int, k: int, d: int, s: int, axis: str) -> int:
    span = d * (k - 1) + 1
    if n + p0 + p1 < span:
        raise ShapeError(f"dilated kernel extent {span} exceeds padded input {axis}={n + p0 + p1}")
    return (n + p0 + p1 - span) // s + 1


def _tap(xp: np.ndarray, i: int, j: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[..., i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s]


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, spec: Optional[ConvSpec] = None) -> Tensor:
    """2-D cross-correlation of ``x`` [B,Cin,H,W] with ``kernel`` [Cout,Cin|1,kh,kw]."""
    spec = spec or ConvSpec()
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got dims {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [Cout,Cin,kh,kw], got dims {kernel.shape}")
    _check_finite(kernel.data, "conv2d kernel")
    B, cin, H, W = x.shape
    cout, ck, kh, kw = kernel.shape
    if spec.depthwise:
        if ck != 1:
            raise ShapeError(f"depthwise kernel channel extent must be 1, got {ck}")
        if cout != cin:
            raise ShapeError(f"depthwise kernel Cout={cout} must equal input Cin={cin}")
    elif ck != cin:
        raise ShapeError(f"kernel channel extent {ck} does not match input Cin={cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias dims {bias.shape} != ({cout},)")

    pads = spec.pads(kh, kw)
    d, s = spec.dilation, spec.stride
    ho = _out_extent(H, pads[0], pads[1], kh, d, s, "H")
    wo = _out_extent(W, pads[2], pads[3], kw, d, s, "W")
    xp = _pad(x.data, pads, spec.padding)
    w = kernel.data
    parents = [x, kernel] + ([bias] if bias is not None else [])

    if spec.depthwise:
        out = np.zeros((B, cin, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                k = w[:, 0, i, j]
                if k.any():
                    out += k[None, :, None, None] * _tap(xp, i, j, d, s, ho, wo)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def bw(g):
            gx = gk = gb = None
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        k = w[:, 0, i, j]
                        if k.any():
                            _tap(gxp, i, j, d, s, ho, wo)[...] += k[None, :, None, None] * g
                gx = _unpad(gxp, pads, spec.padding, H, W)
            if kernel.requires_grad:
                gk = np.zeros_like(w)
                for i in range(kh):
                    for j in range(kw):
                        gk[:, 0, i, j] = np.einsum("bchw,bchw->c", g, _tap(xp, i, j, d, s, ho, wo))
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            return gx, gk, gb

        return _result(out, parents, bw, "conv2d_dw")

    kdim = cin * kh * kw
    if kh == 1 and kw == 1 and s == 1:
        cols = xp.reshape(B, cin, ho * wo)
    else:
        cols = np.empty((B, cin, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _tap(xp, i, j, d, s, ho, wo)
        cols = cols.reshape(B, kdim, ho * wo)
    wmat = w.reshape(cout, kdim)
    out = np.matmul(wmat, cols).reshape(B, cout, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gk = gb = None
        gmat = g.reshape(B, cout, ho * wo)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat)
            if kh == 1 and kw == 1 and s == 1:
                gxp = gcols.reshape(xp.shape)
            else:
                gcols = gcols.reshape(B, cin, kh, kw, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        _tap(gxp, i, j, d, s, ho, wo)[...] += gcols[:, :, i, j]
            gx = _unpad(gxp, pads, spec.padding, H, W)
        if kernel.requires_grad:
            gk = np.einsum("bop,bkp->ok", gmat, cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return _result(out, parents, bw, "conv2d")


def conv_bank(x: Tensor, kernels: np.ndarray, dilations: Iterable[int] = (1,), stride: int = 1,
              padding: str = "replicate") -> Tensor:
    """Apply a fixed bank of K single-channel kernels depthwise to every channel.

    ``kernels`` is a constant [K,kh,kw] array. Returns [B,C,len(dilations)*K,H',W']
    ordered dilation-major. Equivalent to K x len(dilations) depthwise conv2d
    calls with the kernel tiled over channels; zero taps are skipped.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv_bank input must be [B,C,H,W], got dims {x.shape}")
    kernels = np.asarray(kernels, dtype=x.dtype)
    K, kh, kw = kernels.shape
    B, C, H, W = x.shape
    dilations = tuple(dilations)
    outs, plans = [], []
    for d in dilations:
        spec = ConvSpec(stride=stride, dilation=d, padding=padding)
        pads = spec.pads(kh, kw)
        ho = _out_extent(H, pads[0], pads[1], kh, d, stride, "H")
        wo = _out_extent(W, pads[2], pads[3], kw, d, stride, "W")
        xp = _pad(x.data, pads, padding)
        taps = [(i, j) for i in range(kh) for j in range(kw) if kernels[:, i, j].any()]
        views = {t: _tap(xp, t[0], t[1], d, stride, ho, wo) for t in taps}
        y = np.zeros((B, C, K, ho, wo), dtype=x.dtype)
        for k in range(K):
            for (i, j) in taps:
                c = kernels[k, i, j]
                if c == 1:
                    y[:, :, k] += views[(i, j)]
                elif c == -1:
                    y[:, :, k] -= views[(i, j)]
                elif c:
                    y[:, :, k] += c * views[(i, j)]
        outs.append(y)
        plans.append((d, pads, xp.shape, taps, ho, wo))
    out = np.concatenate(outs, axis=2) if len(outs) > 1 else outs[0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for n, (d, pads, pshape, taps, ho, wo) in enumerate(plans):
            gd = g[:, :, n * K:(n + 1) * K]
            gxp = np.zeros(pshape, dtype=x.dtype)
            for (i, j) in taps:
                view = _tap(gxp, i, j, d, stride, ho, wo)
                ks = np.flatnonzero(kernels[:, i, j])
                if len(ks) == K and (kernels[:, i, j] == kernels[0, i, j]).all():
                    view += kernels[0, i, j] * gd.sum(axis=2)
                    continue
                for k in ks:
                    c = kernels[k, i, j]
                    if c == 1:
                        view += gd[:, :, k]
                    elif c == -1:
                        view -= gd[:, :, k]
                    else:
                        view += c * gd[:, :, k]
            gx += _unpad(gxp, pads, padding, H, W)
        return (gx,)

    return _result(out, (x,), bw, "conv_bank")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _windows(x: Tensor, op: str) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{op} input must be [B,C,H,W], got dims {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"{op} needs even H and W, got H={H}, W={W}")
    # window elements in scan order (0,0),(0,1),(1,0),(1,1)
    return x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)


def _unwindow(gw: np.ndarray) -> np.ndarray:
    B, C, h, w, _ = gw.shape
    return np.ascontiguousarray(gw.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w))


def max_pool2(x: Tensor) -> Tensor:
    """Maximum over disjoint 2x2 windows; ties route gradient to the first in scan order."""
    win = _windows(x, "max_pool2")
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = (np.arange(4) == arg[..., None]).astype(x.dtype)
        return (_unwindow(onehot * g[..., None]),)

    return _result(out, (x,), bw, "max_pool2")


def avg_pool2(x: Tensor) -> Tensor:
    win = _windows(x, "avg_pool2")
    # diagonal pairing keeps the rounding identical under 90-degree rotation
    out = ((win[..., 0] + win[..., 3]) + (win[..., 1] + win[..., 2])) * 0.25

    def bw(g):
        return (_unwindow(np.repeat((g * 0.25)[..., None], 4, axis=-1)),)

    return _result(out, (x,), bw, "avg_pool2")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Per-slice matrix product of [*,m,k] and [*,k,n]."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("batched_matmul operands need rank >= 2")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batched_matmul leading extents differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"batched_matmul inner extents differ: {a.shape[-1]} vs {b.shape[-2]}")
    A, Bm = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(Bm, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(A, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(A, Bm), (a, b), bw, "matmul")


def l2_normalize_rows(p: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each trailing-axis row by sqrt(sum of squares + eps^2)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    P = p.data
    norm = np.sqrt(np.einsum("...f,...f->...", P, P) + eps * eps)[..., None]
    y = P / norm

    def bw(g):
        dot = np.einsum("...f,...f->...", y, g)[..., None]
        return ((g - y * dot) / norm,)

    return _result(y, (p,), bw, "l2_normalize_rows")
