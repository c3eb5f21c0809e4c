"""
Dense tensors with tape-based reverse-mode differentiation.

Only the operations the engine needs are implemented. Feature maps are
channels-last (H x W x C); convolution kernels are (kh, kw, Cin, Cout).

Every operation output is checked for NaN/Inf and raises NumericalError
naming the op. Tensors are not mutated after construction; the optimizer
swaps Parameter data wholesale.

Usage
  p = Parameter(np.ones((3, 3)))
  loss = (matmul(x, p) * 0.5).sum()
  backward(loss)          # p.grad now holds dloss/dp
"""

from __future__ import annotations
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, NumericalError

_state = threading.local()
_seq = itertools.count()


# ================= precision / grad mode =================
def current_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextmanager
def precision(dtype):
    """Run ops (on this thread) at another float width; the gradient oracle uses float64."""
    prev = current_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def snapshot_modes() -> Tuple[type, bool]:
    return current_dtype(), grad_enabled()


@contextmanager
def use_modes(modes: Tuple[type, bool]):
    """Apply a snapshot_modes() result on a worker thread."""
    dtype, grad = modes
    prev_grad = grad_enabled()
    _state.grad = grad
    try:
        with precision(dtype):
            yield
    finally:
        _state.grad = prev_grad


# ================= data model =================
@dataclass(eq=False)
class Record:
    op: str
    inputs: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    seq: int
    out_key: int


class Tensor:
    __array_priority__ = 100  # ndarray <op> Tensor defers to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != current_dtype():
            arr = arr.astype(current_dtype())
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"empty tensor shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._record: Optional[Record] = None
        self.name = name

    # ---- metadata ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- operators ----
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, o): return power(self, o)
    def __getitem__(self, idx): return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Learnable leaf; grad is always an array of the value's shape."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def assign(self, data) -> None:
        arr = np.asarray(data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise DimensionError(f"{self.name}: assign shape {arr.shape} != {self.data.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError(f"{self.name}: non-finite update")
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data, inputs: Iterable[Tensor], backward) -> Tensor:
    arr = np.asarray(data)
    if arr.dtype != current_dtype():
        arr = arr.astype(current_dtype())
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._record = None
    out.name = None
    inputs = tuple(inputs)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = Record(op, inputs, backward, next(_seq), id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ================= backward =================
class ComputationRecord:
    """Records reachable from a loss, in execution order."""

    def __init__(self, loss: Tensor):
        seen: set[int] = set()
        recs: list[Record] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            r = t._record
            if r is None or id(r) in seen:
                continue
            seen.add(id(r))
            recs.append(r)
            stack.extend(r.inputs)
        recs.sort(key=lambda r: r.seq)
        self.records = recs

    def __len__(self) -> int:
        return len(self.records)

    def replay(self, loss: Tensor, visit: Optional[Callable[[Record], None]] = None) -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for r in reversed(self.records):
            g = grads.pop(r.out_key, None)
            if g is None:
                continue
            if visit is not None:
                visit(r)
            for t, gi in zip(r.inputs, r.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi), t.data.shape)
                if t._record is None:
                    t.grad = gi.astype(t.data.dtype) if t.grad is None else t.grad + gi
                else:
                    k = id(t)
                    grads[k] = gi if k not in grads else grads[k] + gi


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into every reachable leaf's .grad."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._record is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    ComputationRecord(loss).replay(loss)


# ================= elementwise =================
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result("div", ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, b) -> Tensor:
    """a ** b; b may be a float or a (scalar) Tensor. Tensor exponents need a > 0."""
    a = as_tensor(a)
    ad = a.data
    if not isinstance(b, Tensor):
        e = float(b)
        out = ad ** e
        return _result("pow", out, (a,), lambda g: (g * e * ad ** (e - 1.0),))
    bd = b.data
    out = ad ** bd

    def bw(g):
        ga = g * bd * ad ** (bd - 1.0)
        gb = g * out * np.log(np.maximum(ad, np.finfo(ad.dtype).tiny)) if b.requires_grad else None
        return ga, gb

    return _result("pow", out, (a, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result("log", out, (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > lo
    return _result("clamp_min", np.maximum(a.data, lo), (a,), lambda g: (g * mask,))


# ================= reductions / shape =================
def _expand_like(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _result("sum", out, (a,), lambda g: (_expand_like(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _result("mean", out, (a,), lambda g: (_expand_like(g, shape, axis, keepdims) / n,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape {src} -> {tuple(shape)}: {e}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _result("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"stack: {e}") from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result("stack", out, ts, bw)


def take(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _result("take", a.data[idx], (a,), bw)


# ================= linear algebra =================
def matmul(a, b) -> Tensor:
    """(m,k)@(k,n); 1-D operands act as a row (left) or column (right) vector."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError(f"matmul expects 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # (m,k)@(k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # (k,)@(k,n) -> (n,)
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _result("matmul", out, (a, b), bw)


# ================= normalisation / activations =================
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return _result("log_softmax", y, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance along axis; no learned affine."""
    x = as_tensor(x)
    xd = x.data
    n = xd.shape[axis]
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gs = g.sum(axis=axis, keepdims=True)
        gx = (g * xhat).sum(axis=axis, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gx),)

    return _result("layer_norm", xhat, (x,), bw)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps). Near-zero vectors are scaled by 1/eps, not rejected."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    d = np.maximum(norm, eps)
    y = xd / d
    live = norm > eps

    def bw(g):
        proj = g - y * (g * y).sum(axis=axis, keepdims=True)
        return (np.where(live, proj, g) / d,)

    return _result("l2_normalize", y, (x,), bw)


# ================= convolution =================
def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (Hp, Wp, C) -> (ho*wo, kh*kw*C), patch order (kh, kw, C)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[: stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * xp.shape[2])


def _scatter_windows(cols: np.ndarray, hp: int, wp: int, c: int, kh: int, kw: int,
                     stride: int, ho: int, wo: int) -> np.ndarray:
    d = cols.reshape(ho, wo, kh, kw, c)
    xp = np.zeros((hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += d[:, :, i, j, :]
    return xp


def _crop(xp: np.ndarray, p: int) -> np.ndarray:
    return xp[p : xp.shape[0] - p, p : xp.shape[1] - p] if p else xp


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (H, W, Cin) with kernel (kh, kw, Cin, Cout)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects (H,W,C) and (kh,kw,Cin,Cout), got {x.shape}, {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d stride must be 1 or 2, got {stride}")
    # odd kernels, or non-overlapping patch kernels (k == stride)
    if (kh % 2 == 0 or kw % 2 == 0) and not (kh == kw == stride):
        raise DimensionError(f"conv2d kernel {kh}x{kw} must be odd (or equal the stride)")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output {ho}x{wo} < 1 for input {h}x{w}, kernel {kh}x{kw}")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = _windows(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(ho, wo, cout)
    hp, wp = xp.shape[:2]

    def bw(g):
        gf = g.reshape(ho * wo, cout)
        gk = (cols.T @ gf).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _crop(_scatter_windows(gf @ kmat.T, hp, wp, cin, kh, kw, stride, ho, wo), padding)
        return gx, gk

    return _result("conv2d", out, (x, kernel), bw)


DECONV_PADDING = {2: 0, 4: 1}


def deconv2d(x, kernel, stride: int = 2, padding: Optional[int] = None) -> Tensor:
    """
    Transposed convolution: the input-adjoint of conv2d with the same kernel.
    x is (H, W, kernel.shape[3]); output is (2H, 2W, kernel.shape[2]) for the
    2x2/pad 0 and 4x4/pad 1 presets.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"deconv2d expects (H,W,C) and (kh,kw,Cout,Cin), got {x.shape}, {kernel.shape}")
    kh, kw, cout, cin = kernel.shape
    if stride != 2 or kh != kw or kh not in DECONV_PADDING:
        raise DimensionError(f"deconv2d supports stride 2 with 2x2 or 4x4 kernels, got {kh}x{kw}/s{stride}")
    if x.shape[2] != cin:
        raise DimensionError(f"deconv2d channel mismatch: input {x.shape[2]}, kernel {cin}")
    p = DECONV_PADDING[kh] if padding is None else padding
    h, w = x.shape[:2]
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    xf = x.data.reshape(h * w, cin)
    kmat = kernel.data.reshape(kh * kw * cout, cin)
    out = _crop(_scatter_windows(xf @ kmat.T, hp, wp, cout, kh, kw, stride, h, w), p)

    def bw(g):
        gp = np.pad(g, ((p, p), (p, p), (0, 0))) if p else g
        gcols = _windows(gp, kh, kw, stride, h, w)
        gx = (gcols @ kmat).reshape(h, w, cin) if x.requires_grad else None
        gk = (gcols.T @ xf).reshape(kernel.shape) if kernel.requires_grad else None
        return gx, gk

    return _result("deconv2d", out, (x, kernel), bw)


# ================= resampling =================
def max_pool2d(x, factor: int) -> Tensor:
    """Block maximum over (H, W[, C]); H and W must be divisible by factor."""
    x = as_tensor(x)
    xd = x.data
    flat = xd.ndim == 2
    x3 = xd[:, :, None] if flat else xd
    h, w, c = x3.shape
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"max_pool2d: {h}x{w} not divisible by {factor}")
    blocks = x3.reshape(h // factor, factor, w // factor, factor, c)
    out = blocks.max(axis=(1, 3))
    mask = blocks == out[:, None, :, None, :]
    mask = mask / mask.sum(axis=(1, 3), keepdims=True)

    def bw(g):
        g3 = g[:, :, None] if flat else g
        gx = (mask * g3[:, None, :, None, :]).reshape(h, w, c)
        return (gx[:, :, 0] if flat else gx,)

    return _result("max_pool2d", out[:, :, 0] if flat else out, (x,), bw)


def upsample_nearest(x, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbour expansion of (h, w[, C]) to (target_h, target_w[, C])."""
    x = as_tensor(x)
    h, w = x.shape[:2]
    if target_h < h or target_w < w:
        raise DimensionError(f"upsample_nearest: target {target_h}x{target_w} smaller than {h}x{w}")
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    out = x.data[rows][:, cols]
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, (rows[:, None], cols[None, :]), g)
        return (gx,)

    return _result("upsample_nearest", out, (x,), bw)
