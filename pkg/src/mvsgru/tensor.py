"""Dense tensors with taped reverse-mode differentiation on numpy.

Design notes
------------
* A ``Tape`` records operations in execution order (which is automatically a
  topological order); ``backward(tape, loss)`` replays it in reverse.  Ops
  record themselves on the innermost active tape iff any input requires
  gradients.  With no tape active, ops are forward-only, which is what
  inference wants.
* Numeric precision is a process-global mode: float32 for speed, float64 for
  finite-difference verification.  Tensors created while a mode is active are
  cast to it; see :func:`set_default_dtype` / :class:`using_dtype`.
* Everything is single-threaded numpy, so identical inputs and seeds give
  bitwise-identical results.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []
_GRAD_ENABLED = [True]

_FLOAT_TYPES = (np.float32, np.float64)


def set_default_dtype(dtype) -> None:
    """Set the global numeric mode. Only float32 and float64 are legal."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_TYPES:
        raise ContractError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dt


def default_dtype():
    return _DEFAULT_DTYPE


class using_dtype:
    """Context manager that temporarily switches the global numeric mode."""

    def __init__(self, dtype):
        self.dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


class no_grad:
    """Disable tape recording inside the block (forward-only)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


class Tape:
    """Ordered record of differentiable operations.

    Each entry is ``(out, parents, backward_fn)`` where ``backward_fn(g)``
    accumulates gradients into the parents.  Entries are appended in
    execution order, so every op appears after all of its parents.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        self.entries.append((out, parents, fn))

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A dense float array plus gradient bookkeeping.

    Data has at most 4 axes.  ``grad`` is filled by :func:`backward` and has
    the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.type is not _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensors have at most 4 axes, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError("zero-size tensors are not allowed")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- introspection -----------------------------------------------------

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
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (no copy)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- arithmetic --------------------------------------------------------

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
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- elementwise -------------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absval(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def leaky_relu(self, slope: float = 0.01):
        return leaky_relu(self, slope)

    def clip(self, lo=None, hi=None):
        return clip(self, lo, hi)

    # -- reductions / shape ------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return tmax(self, axis, keepdims)

    def softmax(self, axis):
        return softmax(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim} axes")
    return axis % ndim


# ---------------------------------------------------------------------------
# binary / unary elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data)

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * out.data / b.data)

    return _record(out, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.exp(a.data))

    def bw(g):
        _accum(a, g * out.data)

    return _record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data))

    def bw(g):
        _accum(a, g / a.data)

    return _record(out, (a,), bw)


def absval(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.abs(a.data))

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _record(out, (a,), bw)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(_stable_sigmoid(a.data))

    def bw(g):
        _accum(a, g * out.data * (1.0 - out.data))

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.tanh(a.data))

    def bw(g):
        _accum(a, g * (1.0 - out.data * out.data))

    return _record(out, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data))

    def bw(g):
        _accum(a, g * np.where(a.data > 0, 1.0, slope))

    return _record(out, (a,), bw)


def clip(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient is passed through only inside [lo, hi]."""
    a = _wrap(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = np.ones_like(a.data)
    if lo is not None:
        mask *= a.data >= lo
    if hi is not None:
        mask *= a.data <= hi

    def bw(g):
        _accum(a, g * mask)

    return _record(out, (a,), bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise by a constant boolean mask (not differentiable in cond)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.where(cond, a.data, b.data))

    def bw(g):
        _accum(a, g * cond)
        _accum(b, g * ~cond)

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions, softmax, shape ops
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is not None:
        axis = _check_axis(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _record(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else a.shape[_check_axis(axis, a.ndim)]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis. Gradient routes to the lowest-index maximum."""
    a = _wrap(a)
    axis = _check_axis(axis, a.ndim)
    idx = np.argmax(a.data, axis=axis)
    idx_e = np.expand_dims(idx, axis)
    vals = np.take_along_axis(a.data, idx_e, axis=axis)
    out = Tensor(vals if keepdims else np.squeeze(vals, axis))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gz = np.zeros_like(a.data)
        np.put_along_axis(gz, idx_e, g, axis=axis)
        _accum(a, gz)

    return _record(out, (a,), bw)


def argmax(a: Tensor, axis: int) -> np.ndarray:
    """Index of the maximum (ties resolve to the lowest index). Not differentiable."""
    a = _wrap(a)
    return np.argmax(a.data, axis=_check_axis(axis, a.ndim))


def softmax(a: Tensor, axis: int) -> Tensor:
    a = _wrap(a)
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _record(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _record(out, (a,), bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing only (slices / ints); fancy indexing is not supported."""
    a = _wrap(a)
    out = Tensor(a.data[idx])

    def bw(g):
        gz = np.zeros_like(a.data)
        gz[idx] = g
        _accum(a, gz)

    return _record(out, (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    axis = _check_axis(axis, ts[0].ndim)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _record(out, tuple(ts), bw)


# ---------------------------------------------------------------------------
# gathers
# ---------------------------------------------------------------------------


def take_depth(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0 of a [D, H, W] tensor with integer idx [M, H, W]."""
    a = _wrap(a)
    if a.ndim != 3 or idx.ndim != 3 or idx.shape[1:] != a.shape[1:]:
        raise ShapeError(f"take_depth: bad shapes {a.shape} / {idx.shape}")
    idx = idx.astype(np.int64)
    out = Tensor(np.take_along_axis(a.data, idx, axis=0))
    _, h, w = a.shape

    def bw(g):
        ga = np.zeros_like(a.data)
        iy = np.arange(h)[None, :, None]
        ix = np.arange(w)[None, None, :]
        np.add.at(ga, (idx, iy, ix), g)
        _accum(a, ga)

    return _record(out, (a,), bw)


def gather2d(a: Tensor, iy: np.ndarray, ix: np.ndarray) -> Tensor:
    """out[...] = a[iy[...], ix[...]] for a 2-D tensor; indices are constants."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"gather2d needs a 2-D tensor, got {a.shape}")
    iy = iy.astype(np.int64)
    ix = ix.astype(np.int64)
    out = Tensor(a.data[iy, ix])

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (iy, ix), g)
        _accum(a, ga)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# bilinear sampling / resizing
# ---------------------------------------------------------------------------


def bilinear_sample(grid: Tensor, x, y, mode: str = "zero") -> tuple[Tensor, np.ndarray]:
    """Sample a [C, H, W] grid at fractional coordinates.

    Args:
        grid: feature map, [C, H, W].
        x, y: coordinates in pixel units, Tensor or ndarray of equal shape.
            Differentiable in both the grid and (if Tensors) the coordinates.
        mode: "zero" returns 0 outside [0, W-1] x [0, H-1] and flags those
            points invalid; "edge" clamps to the border and everything is
            valid.

    Returns:
        (samples [C, *coord_shape], valid bool mask [*coord_shape]).
    """
    grid = _wrap(grid)
    if grid.ndim != 3:
        raise ShapeError(f"bilinear_sample needs [C, H, W], got {grid.shape}")
    if mode not in ("zero", "edge"):
        raise ContractError(f"unknown sampling mode {mode!r}")
    c, h, w = grid.shape
    xt = x if isinstance(x, Tensor) else None
    yt = y if isinstance(y, Tensor) else None
    xd = np.asarray(x.data if xt is not None else x, dtype=grid.dtype)
    yd = np.asarray(y.data if yt is not None else y, dtype=grid.dtype)
    if xd.shape != yd.shape:
        raise ShapeError(f"coordinate shapes differ: {xd.shape} vs {yd.shape}")
    cshape = xd.shape
    xf = xd.ravel()
    yf = yd.ravel()

    inside = (xf >= 0) & (xf <= w - 1) & (yf >= 0) & (yf <= h - 1)
    valid = np.ones_like(inside) if mode == "edge" else inside

    xc = np.clip(xf, 0, w - 1)
    yc = np.clip(yf, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    flat = grid.data.reshape(c, h * w)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    t00 = flat[:, i00]
    t01 = flat[:, i01]
    t10 = flat[:, i10]
    t11 = flat[:, i11]

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    blend = t00 * w00 + t01 * w01 + t10 * w10 + t11 * w11
    vf = valid.astype(grid.dtype)
    if mode == "zero":
        blend = blend * vf
    out = Tensor(blend.reshape((c,) + cshape))

    def bw(g):
        g2 = g.reshape(c, -1)
        gm = g2 * vf if mode == "zero" else g2
        if grid.requires_grad:
            acc = np.zeros((h * w, c), dtype=grid.dtype)
            np.add.at(acc, i00, (gm * w00).T)
            np.add.at(acc, i01, (gm * w01).T)
            np.add.at(acc, i10, (gm * w10).T)
            np.add.at(acc, i11, (gm * w11).T)
            _accum(grid, acc.T.reshape(grid.shape))
        if xt is not None and xt.requires_grad:
            dx = (1 - fy) * (t01 - t00) + fy * (t11 - t10)
            gx = (gm * dx).sum(axis=0) * (xf == xc)
            _accum(xt, gx.reshape(cshape))
        if yt is not None and yt.requires_grad:
            dy = (1 - fx) * (t10 - t00) + fx * (t11 - t01)
            gy = (gm * dy).sum(axis=0) * (yf == yc)
            _accum(yt, gy.reshape(cshape))

    parents = tuple(p for p in (grid, xt, yt) if p is not None)
    return _record(out, parents, bw), valid.reshape(cshape)


def _axis_lerp(n_in: int, n_out: int, dtype):
    """Source indices and weights for 1-D bilinear resizing (pixel centers)."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.int64)
    return i0, i1, frac.astype(dtype)


def bilinear_resize(a: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize the trailing two axes of a [C, H, W] or [H, W] tensor.

    Uses the pixel-center convention (output pixel i samples input
    coordinate (i + 0.5) * H_in / H_out - 0.5) with edge clamping, so values
    stay inside the input's convex hull.
    """
    a = _wrap(a)
    if a.ndim not in (2, 3):
        raise ShapeError(f"bilinear_resize needs [H, W] or [C, H, W], got {a.shape}")
    squeeze = a.ndim == 2
    data = a.data[None] if squeeze else a.data
    _, h_in, w_in = data.shape
    h_out, w_out = int(size[0]), int(size[1])
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"bad target size {size}")

    r0, r1, wr = _axis_lerp(h_in, h_out, data.dtype)
    c0, c1, wc = _axis_lerp(w_in, w_out, data.dtype)

    rows = data[:, r0, :] * (1 - wr)[None, :, None] + data[:, r1, :] * wr[None, :, None]
    full = rows[:, :, c0] * (1 - wc)[None, None, :] + rows[:, :, c1] * wc[None, None, :]
    out = Tensor(full[0] if squeeze else full)

    def bw(g):
        g3 = g[None] if squeeze else g
        # undo the column lerp
        grows = np.zeros((g3.shape[0], h_out, w_in), dtype=g3.dtype)
        gm = np.moveaxis(g3, 2, 0)
        acc = np.zeros((w_in,) + gm.shape[1:], dtype=g3.dtype)
        np.add.at(acc, c0, gm * (1 - wc)[:, None, None])
        np.add.at(acc, c1, gm * wc[:, None, None])
        grows = np.moveaxis(acc, 0, 2)
        # undo the row lerp
        gm = np.moveaxis(grows, 1, 0)
        acc = np.zeros((h_in,) + gm.shape[1:], dtype=g3.dtype)
        np.add.at(acc, r0, gm * (1 - wr)[:, None, None])
        np.add.at(acc, r1, gm * wr[:, None, None])
        ga = np.moveaxis(acc, 0, 1)
        _accum(a, ga[0] if squeeze else ga)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    Args:
        x: input, [C, H, W] or [B, C, H, W].
        weight: [C_out, C_in, k, k] with odd k.
        bias: optional [C_out].
        stride: 1 or 2.
        padding: symmetric zero padding; (k-1)//2 gives same-size output at
            stride 1.

    Returns:
        [C_out, H', W'] or [B, C_out, H', W'] matching the input rank, with
        H' = (H + 2*padding - k) // stride + 1.
    """
    x = _wrap(x)
    weight = _wrap(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be [C_out, C_in, k, k], got {weight.shape}")
    k = weight.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"input must be [C, H, W] or [B, C, H, W], got {x.shape}")
    b_n, c_in, h, w = xd.shape
    c_out = weight.shape[0]
    if weight.shape[1] != c_in:
        raise ShapeError(f"input has {c_in} channels but weight expects {weight.shape[1]}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"kernel {k} does not fit input {h}x{w} with padding {padding}")

    if padding:
        xp = np.zeros((b_n, c_in, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = xd
    else:
        xp = xd

    cols = np.empty((c_in, k, k, b_n, h_out, w_out), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * (h_out - 1) + 1:stride,
                       j:j + stride * (w_out - 1) + 1:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c_in * k * k, b_n * h_out * w_out)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    res = wmat @ cols2
    res = res.reshape(c_out, b_n, h_out, w_out).transpose(1, 0, 2, 3)
    if bias is not None:
        bias = _wrap(bias)
        res = res + bias.data[None, :, None, None]
    out = Tensor(res[0] if squeeze else res)

    def bw(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(c_out, b_n * h_out * w_out)
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=1))
        if weight.requires_grad:
            _accum(weight, (gmat @ cols2.T).reshape(weight.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c_in, k, k, b_n, h_out, w_out)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * (h_out - 1) + 1:stride,
                        j:j + stride * (w_out - 1) + 1:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            _accum(x, gx[0] if squeeze else gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-replay the tape from a scalar loss.

    Fills ``.grad`` on every tensor reached and returns the gradients of the
    requires-grad leaves (tensors that are inputs but never outputs on this
    tape).  Parameters not touched by the loss simply do not appear.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    produced = {id(out) for out, _, _ in tape.entries}
    for out, _, fn in reversed(tape.entries):
        if out.grad is not None:
            fn(out.grad)
    leaves: dict[Tensor, np.ndarray] = {}
    for _, parents, _ in tape.entries:
        for p in parents:
            if p.requires_grad and id(p) not in produced and p.grad is not None:
                leaves[p] = p.grad
    return leaves
