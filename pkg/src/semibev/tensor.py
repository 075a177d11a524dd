"""Small dense tensor library with tape-based reverse-mode autodiff.

Everything is float64. There is no implicit broadcasting: binary ops take
either two tensors of identical shape or a tensor and a python scalar.
Use :func:`expand_to` when a smaller tensor must be repeated explicitly.

Recording is define-by-run. Any op whose inputs require grad appends an
entry to the thread's active :class:`Tape`; :func:`backward` walks that
tape in reverse and then marks it consumed, so running backward twice on
the same graph raises ``RuntimeError``.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.entries: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], rule: Callable) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a tape that already ran backward")
        out._tape = self
        out._node = len(self.entries)
        self.entries.append((out, inputs, rule))

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


class _Local(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default: Tape = Tape()
        self.grad_enabled = True


_local = _Local()


def active_tape() -> Tape:
    if _local.stack:
        return _local.stack[-1]
    if _local.default.consumed:
        _local.default = Tape()
    return _local.default


@contextmanager
def no_grad():
    """Run ops without recording anything, whatever requires_grad says."""
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)  # always copy; tensors own their buffer
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        a = np.asarray(arr, dtype=DTYPE)
        # ascontiguousarray would promote 0-d results to shape (1,)
        t.data = a if a.flags.c_contiguous else np.ascontiguousarray(a)
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_error(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _make(arr: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap a result and record ``rule`` if any input needs gradient.

    ``rule(g)`` receives the upstream gradient and returns one gradient
    array (or None) per input, in order.
    """
    out = Tensor._wrap(arr)
    if _local.grad_enabled and any(t.requires_grad for t in inputs):
        tape = active_tape()
        for t in inputs:
            if t._tape is not None and t._tape is not tape:
                raise RuntimeError("input belongs to another graph; detach it or rerun its forward pass")
        out.requires_grad = True
        tape.record(out, tuple(inputs), rule)
    return out


# ----------------------------------------------------------------- elementwise

def _check_pair(a: Tensor, b, opname: str):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
        return b, False
    if isinstance(b, np.ndarray) and b.ndim > 0:
        raise TypeError(f"{opname}: wrap arrays in Tensor explicitly")
    return float(b), True


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b, scalar = _check_pair(a, b, "add")
    if scalar:
        return _make(a.data + b, (a,), lambda g: (g,))
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b, scalar = _check_pair(a, b, "sub")
    if scalar:
        return _make(a.data - b, (a,), lambda g: (g,))
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b, scalar = _check_pair(a, b, "mul")
    if scalar:
        return _make(a.data * b, (a,), lambda g: (g * b,))
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b, scalar = _check_pair(a, b, "div")
    if scalar:
        return _make(a.data / b, (a,), lambda g: (g / b,))
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``div``."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "div": div}[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------ reductions

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axes, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return _make(x.data.sum(axis=axes), (x,),
                 lambda g: (np.broadcast_to(np.reshape(g, kept), shape).copy(),))


def mean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return div(sum(x, axes), float(count))


def reduce(op_kind: str, x: Tensor, axes=None) -> Tensor:
    if op_kind == "sum":
        return sum(x, axes)
    if op_kind == "mean":
        return mean(x, axes)
    raise ValueError(f"unknown reduction {op_kind!r}")


# ------------------------------------------------------------ shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def flip(x: Tensor, axis: int) -> Tensor:
    return _make(np.flip(x.data, axis), (x,), lambda g: (np.flip(g, axis),))


def expand_to(x: Tensor, shape) -> Tensor:
    """Repeat ``x`` along size-1 axes to reach ``shape`` (same rank required)."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(a not in (1, b) for a, b in zip(x.shape, shape)):
        raise ValueError(f"expand_to: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    return _make(np.broadcast_to(x.data, shape), (x,),
                 lambda g: (g.sum(axis=axes, keepdims=True),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def take(x: Tensor, i: int) -> Tensor:
    """``x[i:i+1]`` along the first axis."""
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape)
        gx[i:i + 1] = g
        return (gx,)

    return _make(x.data[i:i + 1], (x,), rule)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor._wrap(x.data.copy())


# -------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, ho, wo, k, k) strided view, no copy
    n, c, hp, wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, ho, wo, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)


def _pads(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return p, p, p, p
    pads = tuple(int(p) for p in padding)
    if len(pads) != 4 or min(pads) < 0:
        raise ValueError(f"padding must be an int or (top, bottom, left, right), got {padding}")
    return pads


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (C×H×W or N×C×H×W) with ``kernel`` (Cout×Cin×k×k).

    ``padding`` is an int or a (top, bottom, left, right) tuple of zero
    padding. ``bias`` of shape (Cout,) is optional and added per output
    channel. The output size must come out integral; nothing is floored.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d: expected 3-d or 4-d input, got {x.shape}")
    cout, cin, k, k2 = kernel.shape
    n, c, h, w = xd.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {kernel.shape}")
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    pt, pb, pl, pr = _pads(padding)
    hn, wn = h + pt + pb - k, w + pl + pr - k
    if hn < 0 or wn < 0 or hn % stride or wn % stride:
        raise ValueError(
            f"conv2d: non-integral output size for H={h}, W={w}, k={k}, "
            f"stride={stride}, padding={padding}")
    ho, wo = hn // stride + 1, wn // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else xd
    xp = np.ascontiguousarray(xp)
    win = _windows(xp, k, stride, ho, wo)
    # cols: (C*k*k, N*ho*wo); each kernel tap is one contiguous block
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(cin * k * k, n * ho * wo)
    wmat = kernel.data.reshape(cout, cin * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if single:
        out = out[0]

    def rule(g):
        g4 = g[None] if single else g
        gm = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gk = (gm @ cols.T).reshape(kernel.shape)
        gb = gm.sum(axis=1) if bias is not None else None
        if not x.requires_grad:
            return (None, gk) if bias is None else (None, gk, gb)
        gcols = (wmat.T @ gm).reshape(cin, k, k, n, ho, wo)
        gxp = np.zeros((cin, n) + xp.shape[2:])
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, :, pt:pt + h, pl:pl + w].transpose(1, 0, 2, 3)
        if single:
            gx = gx[0]
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, rule)


def linear_map(x: Tensor, m) -> Tensor:
    """``x @ m`` for a constant matrix ``m`` (dense array or scipy sparse).

    ``m`` never receives a gradient; it is how fixed resampling weights
    enter the graph without paying for a dense product.
    """
    if x.ndim != 2 or x.shape[1] != m.shape[0]:
        raise ValueError(f"linear_map: incompatible shapes {x.shape} and {m.shape}")
    mt = m.T
    out = np.asarray(m.T @ x.data.T).T if hasattr(m, "tocsr") else x.data @ m
    return _make(out, (x,), lambda g: (np.asarray(mt.T @ g.T).T if hasattr(m, "tocsr") else g @ mt,))


# -------------------------------------------------------------------- backward

def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf.

    If ``leaves`` is given, each of them ends up with a gradient (zeros when
    the loss does not depend on it) and the gradients are returned in order.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = list(leaves) if leaves is not None else []
    if loss._node is None:
        # constant loss: nothing was recorded
        if loss.requires_grad and not leaves:
            leaves = [loss]
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros(leaf.shape)
        if loss.requires_grad:
            loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return [leaf.grad for leaf in leaves]

    tape = loss._tape
    if tape.consumed:
        raise RuntimeError("backward already ran on this graph; re-run the forward pass")
    grads: dict[int, np.ndarray] = {loss._node: np.ones(loss.shape)}
    for idx in range(loss._node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        _, inputs, rule = tape.entries[idx]
        for inp, gi in zip(inputs, rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None or inp._tape is not tape:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp._node in grads:
                grads[inp._node] = grads[inp._node] + gi
            else:
                grads[inp._node] = gi
    tape.consumed = True
    tape.entries = []
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros(leaf.shape)
    return [leaf.grad for leaf in leaves]
