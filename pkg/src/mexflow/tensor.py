"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every differentiable operation computes its result eagerly with numpy and,
when a Tape is active and an operand is tracked, records a vector-Jacobian
product closure. `Tape.backward` replays the closures in exact reverse
execution order, accumulating gradients additively on fan-out.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
one of them must be a scalar or a per-channel vector matching the other's
last axis. Image layout is height x width x channels (batched: N first).
"""

from __future__ import annotations

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's contract."""


class Tensor:
    """A shaped float64 value; `requires_grad` marks trainable leaves."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds supported rank {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; all routing through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed operations, replayable in reverse."""

    def __init__(self):
        self._entries = []  # (out, inputs, vjp)

    def __len__(self):
        return len(self._entries)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def _record(self, out, inputs, vjp):
        self._entries.append((out, inputs, vjp))

    def backward(self, output: Tensor, seed=None):
        """Accumulate d<seed, output>/d(leaf) on every tracked leaf's .grad.

        The tape is consumed: a second backward requires a fresh recording.
        """
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.data.shape:
            raise ShapeError(
                f"seed shape {seed.shape} does not match output shape {output.data.shape}"
            )
        for out, inputs, _ in self._entries:
            out.grad = None
            for t in inputs:
                t.grad = None
        output.grad = seed.copy()
        for out, _, vjp in reversed(self._entries):
            if out.grad is None:
                continue
            vjp(out.grad)
        self._entries.clear()


def _active():
    return _TAPES[-1] if _TAPES else None


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _finish(data, inputs, vjp) -> Tensor:
    out = Tensor(data)
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, vjp)
    return out


def _check_broadcast(sa, sb):
    if sa == sb:
        return
    for small, big in ((sa, sb), (sb, sa)):
        if small == ():
            return
        if len(small) == 1 and len(big) >= 1 and small[0] == big[-1]:
            return
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if shape == ():
        return g.sum()
    return g.sum(axis=tuple(range(g.ndim - 1)))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _finish(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _finish(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)

    def vjp(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _finish(a.data * b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _coerce(a)

    def vjp(g):
        _accum(a, -g)

    return _finish(-a.data, (a,), vjp)


def exp(a) -> Tensor:
    a = _coerce(a)
    res = np.exp(a.data)

    def vjp(g):
        _accum(a, g * res)

    return _finish(res, (a,), vjp)


def tanh(a) -> Tensor:
    a = _coerce(a)
    res = np.tanh(a.data)

    def vjp(g):
        _accum(a, g * (1.0 - res * res))

    return _finish(res, (a,), vjp)


def elu(a) -> Tensor:
    """ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise."""
    a = _coerce(a)
    res = np.where(a.data > 0, a.data, np.expm1(a.data))

    def vjp(g):
        _accum(a, g * np.where(a.data > 0, 1.0, res + 1.0))

    return _finish(res, (a,), vjp)


def log_abs(a) -> Tensor:
    """log|x| elementwise; the gradient is 1/x."""
    a = _coerce(a)

    def vjp(g):
        _accum(a, g / a.data)

    return _finish(np.log(np.abs(a.data)), (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of two matrices or two equal-length stacks of matrices."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul expects two rank-2 or two rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul stack lengths disagree: {a.shape} vs {b.shape}")

    def vjp(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _finish(a.data @ b.data, (a, b), vjp)


def trace(a) -> Tensor:
    """Trace of a matrix (scalar out) or of a stack of matrices ((B,) out)."""
    a = _coerce(a)
    if a.ndim not in (2, 3) or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"trace expects square matrices, got {a.shape}")
    n = a.shape[-1]
    res = np.trace(a.data, axis1=-2, axis2=-1)

    def vjp(g):
        gi = np.zeros_like(a.data)
        idx = np.arange(n)
        if a.ndim == 2:
            gi[idx, idx] = g
        else:
            gi[:, idx, idx] = np.asarray(g)[:, None]
        _accum(a, gi)

    return _finish(res, (a,), vjp)


def logabsdet(a) -> Tensor:
    """log|det| of a square matrix via LU; gradient is inverse-transpose."""
    from . import linalg

    a = _coerce(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"logabsdet expects a square matrix, got {a.shape}")
    _, res = linalg.slogdet(a.data)

    def vjp(g):
        _accum(a, g * linalg.inverse(a.data).T)

    return _finish(res, (a,), vjp)


def conv2d(x, kernel) -> Tensor:
    """Same-padded cross-correlation; x is (h,w,cin) or (N,h,w,cin), kernel (kh,kw,cin,cout)."""
    x, kernel = _coerce(x), _coerce(kernel)
    squeeze_batch = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects image rank 3/4 and kernel rank 4, got {x.shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"kernel spatial extents must be 1 or 3, got {kh}x{kw}")
    xs = x.data[None] if squeeze_batch else x.data
    if xs.shape[-1] != cin:
        raise ShapeError(f"channel mismatch: input has {xs.shape[-1]}, kernel expects {cin}")
    n, h, w, _ = xs.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(xs, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((n, h, w, cout))
    for di in range(kh):
        for dj in range(kw):
            out += xp[:, di : di + h, dj : dj + w, :] @ kernel.data[di, dj]

    def vjp(g):
        gs = g[None] if squeeze_batch else g
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for di in range(kh):
                for dj in range(kw):
                    gk[di, dj] = np.tensordot(
                        xp[:, di : di + h, dj : dj + w, :], gs, axes=([0, 1, 2], [0, 1, 2])
                    )
            _accum(kernel, gk)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di : di + h, dj : dj + w, :] += gs @ kernel.data[di, dj].T
        gx = gxp[:, ph : ph + h, pw : pw + w, :]
        _accum(x, gx[0] if squeeze_batch else gx)

    return _finish(out[0] if squeeze_batch else out, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for rank {ndim}")
    return tuple(sorted(ax % ndim for ax in axes))


def _expand(g, axes, shape):
    for ax in axes:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axes=None) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)

    def vjp(g):
        _accum(a, _expand(g, axes, a.shape))

    return _finish(a.data.sum(axis=axes), (a,), vjp)


def reduce_mean(a, axes=None) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def vjp(g):
        _accum(a, _expand(g, axes, a.shape) / count)

    return _finish(a.data.mean(axis=axes), (a,), vjp)


def reduce_max(a, axes=None) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)
    res = a.data.max(axis=axes)

    def vjp(g):
        mask = a.data == _expand(res, axes, a.shape)
        _accum(a, _expand(g, axes, a.shape) * mask)

    return _finish(res, (a,), vjp)


# ---------------------------------------------------------------------------
# shape movement


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds supported rank {MAX_RANK}")

    def vjp(g):
        _accum(a, g.reshape(a.shape))

    return _finish(a.data.reshape(shape), (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"axes {axes} not a permutation for rank {a.ndim}")
    inv = tuple(np.argsort(axes))

    def vjp(g):
        _accum(a, g.transpose(inv))

    return _finish(a.data.transpose(axes), (a,), vjp)


def concat(parts, axis: int) -> Tensor:
    parts = [_coerce(p) for p in parts]
    axis = int(axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _finish(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _coerce(a)
    axis = int(axis)
    if not 0 <= axis < a.ndim or start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow({axis}, {start}, {length}) invalid for shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        gi = np.zeros_like(a.data)
        gi[idx] = g
        _accum(a, gi)

    return _finish(a.data[idx].copy(), (a,), vjp)


def _s2c(arr):
    n, h, w, c = arr.shape
    return arr.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4 * c)


def _c2s(arr):
    n, h, w, c = arr.shape
    return arr.reshape(n, h, w, 2, 2, c // 4).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c // 4)


def space_to_channels(x) -> Tensor:
    """Move 2x2 spatial blocks into channels, position-major: TL, TR, BL, BR."""
    x = _coerce(x)
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"space_to_channels needs even spatial extents, got {x.shape}")

    def vjp(g):
        _accum(x, _c2s(g))

    return _finish(_s2c(x.data), (x,), vjp)


def channels_to_space(x) -> Tensor:
    x = _coerce(x)
    if x.ndim != 4 or x.shape[3] % 4:
        raise ShapeError(f"channels_to_space needs channels divisible by 4, got {x.shape}")

    def vjp(g):
        _accum(x, _s2c(g))

    return _finish(_c2s(x.data), (x,), vjp)
