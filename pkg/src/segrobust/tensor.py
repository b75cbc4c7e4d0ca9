"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors hold data in one of two precisions (single for training and attacks,
double for gradient verification). Operations record themselves on the active
:class:`Tape`; ``tape.backward(root)`` walks the records once, newest first,
accumulating gradients into each participating tensor's ``grad`` buffer.

Spatial ops accept ``[C, H, W]`` tensors and the batched ``[N, C, H, W]`` form.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

DTYPES = {"single": np.float32, "double": np.float64}

_mode: contextvars.ContextVar[str] = contextvars.ContextVar("segrobust_mode", default="single")
_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("segrobust_tape", default=None)


def current_mode() -> str:
    return _mode.get()


def current_dtype():
    return DTYPES[_mode.get()]


@contextlib.contextmanager
def precision(mode: str):
    """Select ``"single"`` or ``"double"`` for tensors created inside the block."""
    if mode not in DTYPES:
        raise ContractError(f"unknown precision mode {mode!r}")
    token = _mode.set(mode)
    try:
        yield
    finally:
        _mode.reset(token)


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "node")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or current_dtype(), copy=True)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t._grad = None
        t.requires_grad = requires_grad
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype).reshape(self.data.shape)
        else:
            self._grad += g

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)


@dataclass
class Record:
    """One recorded operation: ``backward_fn`` maps the output gradient to
    one gradient per input (``None`` for inputs that need none)."""

    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    records: list = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape.reset(self._token)
        self._token = None

    def record(self, op, inputs, output, backward_fn) -> None:
        output.node = len(self.records)
        self.records.append(Record(op, inputs, output, backward_fn))

    def backward(self, root: Tensor) -> None:
        """Fill ``grad`` of every tensor reachable from ``root`` with d(root)/d(tensor)."""
        if root.data.ndim != 0:
            raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
        root._accumulate(np.ones_like(root.data))
        stop = root.node if root.node is not None else -1
        for rec in reversed(self.records[: stop + 1]):
            g_out = rec.output._grad
            if g_out is None:
                continue
            grads = rec.backward_fn(g_out)
            for inp, g in zip(rec.inputs, grads):
                if g is not None and inp.requires_grad:
                    inp._accumulate(g)


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)


@contextlib.contextmanager
def no_tape():
    """Run the block without recording (pure inference)."""
    token = _tape.set(None)
    try:
        yield
    finally:
        _tape.reset(token)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else current_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype), False)


def _check_mode(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ContractError(f"mixed precision graph: {dt.name} and {t.dtype.name}")


def _emit(op: str, out: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _tape.get()
    result = Tensor._wrap(out, needs and tape is not None)
    if result.requires_grad:
        tape.record(op, inputs, result, backward_fn)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _spatial(x: Tensor, name: str) -> np.ndarray:
    if x.data.ndim == 3:
        return x.data[None]
    if x.data.ndim == 4:
        return x.data
    raise ShapeError(f"{name} expects [C,H,W] or [N,C,H,W], got shape {x.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_mode(a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_mode(a, b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_mode(a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _emit("mul", out, (a, b), back)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_mode(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return _emit("div", out, (a, b), back)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant real exponent."""
    xd = x.data
    e = float(exponent)
    out = np.power(xd, e).astype(xd.dtype, copy=False)

    def back(g):
        if e == 0.0:
            return (np.zeros_like(xd),)
        return (g * (e * np.power(xd, e - 1.0)).astype(xd.dtype, copy=False),)

    return _emit("pow", out, (x,), back)


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; gradient passes only where the input is inside."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = (xd >= lo) & (xd <= hi)
    return _emit("clamp", out, (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return _emit("relu", np.where(pos, xd, 0).astype(xd.dtype, copy=False), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # exp of a non-positive argument only, so |x| in the hundreds cannot overflow
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def sum_(x: Tensor, axis=None) -> Tensor:
    xd = x.data
    out = np.asarray(xd.sum(axis=axis), dtype=xd.dtype)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _emit("sum", out, (x,), back)


def mean(x: Tensor) -> Tensor:
    xd = x.data
    n = xd.size
    out = np.asarray(xd.mean(), dtype=xd.dtype)
    return _emit("mean", out, (x,), lambda g: (np.full(xd.shape, g / n, dtype=xd.dtype),))


# ---------------------------------------------------------------- spatial


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded, stride-1 cross-correlation.

    ``x`` is ``[C,H,W]`` or ``[N,C,H,W]``; ``kernel`` is ``[F,C,kh,kw]`` with odd
    ``kh``/``kw``; ``bias`` is ``[F]``.
    """
    _check_mode(x, kernel, bias)
    xd = _spatial(x, "conv2d")
    wd, bd = kernel.data, bias.data
    if wd.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [F,C,kh,kw], got {wd.shape}")
    f, c, kh, kw = wd.shape
    n, cx, h, w = xd.shape
    if cx != c:
        raise ShapeError(f"conv2d: input has {cx} channels but kernel expects {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if bd.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bd.shape}")
    ph, pw = kh // 2, kw // 2
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
        xp[:, :, ph : ph + h, pw : pw + w] = xd
    else:
        xp = xd
    # [N,C,H,W,kh,kw] -> [N,H*W,C*kh*kw]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n, h * w, c * kh * kw)
    wmat = wd.reshape(f, c * kh * kw)
    # stacked matmul runs one gemm per sample, so results do not depend on batch size
    out = np.matmul(cols, wmat.T)
    out = out.transpose(0, 2, 1).reshape(n, f, h, w) + bd[None, :, None, None]
    batched = x.data.ndim == 4
    if not batched:
        out = out[0]

    def back(g):
        g4 = g if batched else g[None]
        gm = g4.reshape(n, f, h * w).transpose(0, 2, 1)  # [N,HW,F]
        gx = gw = gb = None
        if kernel.requires_grad:
            gw = (gm.reshape(n * h * w, f).T @ cols.reshape(n * h * w, -1)).reshape(wd.shape)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, h, w, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + h, j : j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
            if not batched:
                gx = gx[0]
        return gx, gw, gb

    return _emit("conv2d", out, (x, kernel, bias), back)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pool; ties route the gradient to the first cell in row-major order."""
    xd = _spatial(x, "maxpool2x2")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    win = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    batched = x.data.ndim == 4
    if not batched:
        out = out[0]

    def back(g):
        g4 = g if batched else g[None]
        onehot = np.zeros(win.shape, dtype=xd.dtype)
        np.put_along_axis(onehot, idx[..., None], g4[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx if batched else gx[0],)

    return _emit("maxpool2x2", out, (x,), back)


def upsample2x2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _spatial(x, "upsample2x2")
    xd = x.data
    out = np.repeat(np.repeat(xd, 2, axis=-2), 2, axis=-1)

    def back(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

    return _emit("upsample2x2", out, (x,), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_mode(a, b)
    _spatial(a, "concat_channels")
    _spatial(b, "concat_channels")
    if a.data.ndim != b.data.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[-3]
    out = np.concatenate([a.data, b.data], axis=-3)
    return _emit("concat", out, (a, b), lambda g: (g[..., :ca, :, :], g[..., ca:, :, :]))


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / (|a| + |n|)``; 0 when both vanish."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return diff / scale


def check_gradients(
    build: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-6,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``build(params)`` against central differences.

    ``build`` receives a name -> Tensor mapping and must return a scalar Tensor.
    Runs entirely in double precision.
    """
    with precision("double"):
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        leaves = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
        with Tape() as tape:
            root = build(leaves)
        if root.requires_grad:
            tape.backward(root)
        analytic = {k: t.grad for k, t in leaves.items()}

        def value(name, flat_index, delta):
            arrs = dict(base)
            arr = base[name].copy()
            arr.reshape(-1)[flat_index] += delta
            arrs[name] = arr
            with no_tape():
                return float(build({k: Tensor(v) for k, v in arrs.items()}).data)

        errors = {}
        for name, arr in base.items():
            numeric = np.zeros(arr.size)
            for i in range(arr.size):
                numeric[i] = (value(name, i, step) - value(name, i, -step)) / (2 * step)
            errors[name] = relative_error(analytic[name].reshape(-1), numeric)
    return GradCheckReport(errors, tolerance)
