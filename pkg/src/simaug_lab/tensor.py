"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its operands and a backward rule on the
output tensor. :func:`backward` collects the nodes reachable from a scalar
loss and replays them in reverse creation order, which is a valid reverse
topological order because an output is always created after its operands.

Arrays are plain :class:`numpy.ndarray` objects; the dtype of the operands is
preserved, so the model trains in float32 while gradient checks run in
float64.
"""

from __future__ import annotations

import contextlib
import itertools
import os
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "backward",
    "gradients",
    "input_gradient",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "conv2d",
    "conv_gru_cell",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax",
    "sum",
    "mean",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "smooth_l1",
    "sign",
    "sample_linf_noise",
    "gradcheck",
    "dump_tensor",
    "load_tensor",
]

_counter = itertools.count()
_local = threading.local()
_debug = os.environ.get("SIMAUG_LAB_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while debug mode is on."""


def set_debug(flag: bool) -> None:
    """Turn NaN/Inf detection on every primitive output on or off."""
    global _debug
    _debug = bool(flag)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording backward rules."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """An n-dimensional array node in a differentiable computation.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their dtype; anything else becomes float64.
    requires_grad : bool, default=False
        Whether gradients should flow to (and accumulate in) this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)
        self.op = "leaf"

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _slice(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_counter)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), rule, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), rule, "matmul")


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    # xp: (N, h+kh-1, w+kw-1, C) -> (N, h, w, kh*kw*C), ordered (dy, dx, c)
    if kh == 1 and kw == 1:
        return xp
    return np.concatenate(
        [xp[:, dy : dy + h, dx : dx + w, :] for dy in range(kh) for dx in range(kw)], axis=-1
    )


def _pad_hw(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if not (ph or pw):
        return a
    n, h, w, c = a.shape
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=a.dtype)
    out[:, ph : ph + h, pw : pw + w, :] = a
    return out


def _conv_input_grad(gcols: np.ndarray, padded_shape, kh: int, kw: int, h: int, w: int, ph: int, pw: int):
    # gcols: (N, h, w, kh*kw, C) -> gradient w.r.t. the unpadded input
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    k = 0
    for dy in range(kh):
        for dx in range(kw):
            gxp[:, dy : dy + h, dx : dx + w, :] += gcols[:, :, :, k, :]
            k += 1
    return gxp[:, ph : padded_shape[1] - ph, pw : padded_shape[2] - pw, :]


def conv2d(x, weight, padding: int | None = None) -> Tensor:
    """2-D cross-correlation, stride 1, channels-last.

    ``x`` is ``(N, H, W, C_in)`` and ``weight`` is ``(kh, kw, C_in, C_out)``.
    With the default padding of ``kh // 2`` zeros the spatial size is kept
    for odd kernels.
    """
    x, weight = _pair(x, weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[-1] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {weight.shape} do not conform")
    kh, kw, cin, cout = weight.shape
    pad = kh // 2 if padding is None else int(padding)
    pad_w = kw // 2 if padding is None else int(padding)
    n, hin, win, _ = x.shape
    hout = hin + 2 * pad - kh + 1
    wout = win + 2 * pad_w - kw + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    xp = _pad_hw(x.data, pad, pad_w)
    cols = _im2col(xp, kh, kw, hout, wout)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols.reshape(-1, kh * kw * cin) @ wmat).reshape(n, hout, wout, cout)

    def rule(g):
        gx = gw = None
        g2 = g.reshape(-1, cout)
        if weight.requires_grad:
            gw = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(weight.shape)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, hout, wout, kh * kw, cin)
            gx = _conv_input_grad(gcols, xp.shape, kh, kw, hout, wout, pad, pad_w)
        return gx, gw

    return _make(out, (x, weight), rule, "conv2d")


def conv_gru_cell(gates_x, state, weight) -> Tensor:
    """One convolutional GRU step as a single primitive.

    ``gates_x`` holds the precomputed input contributions ``(N, H, W, 3d)``
    ordered update/reset/candidate, ``state`` is ``(N, H, W, d)`` and
    ``weight`` the ``(k, k, d, 3d)`` recurrent kernel::

        z = sigmoid(xz + conv(h)_z)
        r = sigmoid(xr + conv(h)_r)
        n = tanh(xn + r * conv(h)_n)
        h' = n + z * (h - n)

    Equal to composing :func:`conv2d`, :func:`sigmoid`, :func:`tanh` and
    arithmetic, with one tape node instead of about fifteen.
    """
    gates_x, state = _as_tensor(gates_x), _as_tensor(state)
    weight = _as_tensor(weight, like=state)
    kh, kw, d, d3 = weight.shape
    if state.ndim != 4 or state.shape[-1] != d or d3 != 3 * d or gates_x.shape != state.shape[:-1] + (d3,):
        raise ShapeError(
            f"conv_gru_cell: gates {gates_x.shape}, state {state.shape}, kernel {weight.shape} do not conform"
        )
    n_, hh, ww, _ = state.shape
    hp = _pad_hw(state.data, kh // 2, kw // 2)
    cols = _im2col(hp, kh, kw, hh, ww).reshape(-1, kh * kw * d)
    wmat = weight.data.reshape(kh * kw * d, d3)
    gh = (cols @ wmat).reshape(n_, hh, ww, d3)
    gx = gates_x.data
    z = 0.5 * (np.tanh(0.5 * (gx[..., :d] + gh[..., :d])) + 1.0)
    r = 0.5 * (np.tanh(0.5 * (gx[..., d : 2 * d] + gh[..., d : 2 * d])) + 1.0)
    ghn = gh[..., 2 * d :]
    cand = np.tanh(gx[..., 2 * d :] + r * ghn)
    h = state.data
    out = cand + z * (h - cand)

    def rule(g):
        dcand = g * (1.0 - z)
        dz = g * (h - cand)
        da_n = dcand * (1.0 - cand * cand)
        da_r = (da_n * ghn) * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dgx = np.concatenate([da_z, da_r, da_n], axis=-1)
        dgh = np.concatenate([da_z, da_r, da_n * r], axis=-1)
        g2 = dgh.reshape(-1, d3)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gh_state = None
        if state.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n_, hh, ww, kh * kw, d)
            gh_state = _conv_input_grad(gcols, hp.shape, kh, kw, hh, ww, kh // 2, kw // 2) + g * z
        return (dgx if gates_x.requires_grad else None), gh_state, gw

    return _make(out, (gates_x, state, weight), rule, "conv_gru_cell")


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # tanh form avoids overflow warnings for large |x|
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make(y.astype(x.dtype, copy=False), (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x, eps: float | None = None) -> Tensor:
    """Natural log; with ``eps`` the input is clamped from below first.

    Clamped elements get zero gradient.
    """
    x = _as_tensor(x)
    if eps is None:
        src = x.data
        return _make(np.log(src), (x,), lambda g: (g / src,), "log")
    keep = x.data >= eps
    src = np.where(keep, x.data, eps).astype(x.dtype, copy=False)
    return _make(np.log(src), (x,), lambda g: (np.where(keep, g / src, 0.0).astype(g.dtype),), "log")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), rule, "softmax")


def smooth_l1(pred, target) -> Tensor:
    """Elementwise ``0.5 d**2`` if ``|d| < 1`` else ``|d| - 0.5``, ``d = pred - target``."""
    pred, target = _pair(pred, target)
    _broadcast_shape("smooth_l1", pred, target)
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < 1.0
    out = np.where(small, 0.5 * d * d, ad - 0.5).astype(d.dtype, copy=False)
    slope = np.where(small, d, np.sign(d)).astype(d.dtype, copy=False)

    def rule(g):
        gd = g * slope
        return (
            _unbroadcast(gd, pred.shape) if pred.requires_grad else None,
            _unbroadcast(-gd, target.shape) if target.requires_grad else None,
        )

    return _make(out, (pred, target), rule, "smooth_l1")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), rule, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(np.asarray(out), (x,), rule, "mean")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def rule(g):
        idx = [slice(None)] * nd
        grads = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx[ax] = slice(lo, hi)
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return tuple(grads)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, rule, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: no operands")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    ax = axis % (ts[0].ndim + 1)

    def rule(g):
        return tuple(np.take(g, i, axis=ax) if t.requires_grad else None for i, t in enumerate(ts))

    return _make(np.stack([t.data for t in ts], axis=ax), ts, rule, "stack")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def _slice(x: Tensor, index) -> Tensor:
    if not _basic_index(index):
        raise TypeError("only basic (slice/int) indexing is differentiable")
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {x.shape}") from None

    def rule(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(np.asarray(out), (x,), rule, "slice")


# ---------------------------------------------------------------------------
# reverse pass


def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack_.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def _propagate(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    done: dict[int, tuple[Tensor, np.ndarray]] = {}
    # buffers allocated here may be accumulated in place; rule outputs may alias
    owned: set[int] = set()
    if not loss.requires_grad:
        return done
    for node in _collect(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        done[id(node)] = (node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key not in grads:
                grads[key] = pg
            elif key in owned and grads[key].shape == np.shape(pg):
                grads[key] += pg
            else:
                grads[key] = grads[key] + pg
                owned.add(key)
    return done


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every reachable ``t``."""
    for node, g in _propagate(loss).values():
        g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
        node.grad = g if node.grad is None else node.grad + g


def gradients(loss: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Return ``d loss / d x`` for each input without touching any ``.grad``."""
    done = _propagate(loss)
    out = []
    for x in inputs:
        hit = done.get(id(x))
        if hit is None:
            out.append(np.zeros(x.shape, dtype=x.dtype))
        else:
            out.append(np.array(hit[1], dtype=x.dtype).reshape(x.shape))
    return out


def input_gradient(loss_fn: Callable, features, labels=None, frozen: Iterable[Tensor] = ()) -> Tensor:
    """Gradient of ``loss_fn(features, labels)`` with respect to the features.

    Tensors in ``frozen`` (typically the model parameters) are excluded from
    differentiation for the duration of the call, so their ``.grad`` is left
    alone and no parameter gradients are computed.
    """
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    x = Tensor(data, requires_grad=True)
    frozen = list(frozen)
    flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad = False
    try:
        loss = loss_fn(x, labels)
        (g,) = gradients(loss, [x])
    finally:
        for p, f in zip(frozen, flags):
            p.requires_grad = f
    return Tensor(g)


# ---------------------------------------------------------------------------
# non-differentiable helpers


def sign(t) -> Tensor:
    """Elementwise sign with ``sign(0) == 0``."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return Tensor(np.sign(data))


def sample_linf_noise(shape, bound: float, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """I.i.d. uniform noise in ``[-bound, bound]``."""
    if bound < 0:
        raise ValueError(f"noise bound must be >= 0, got {bound}")
    if bound == 0:
        return Tensor(np.zeros(shape, dtype=dtype))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Max elementwise relative error between autodiff and central differences.

    ``fn`` maps float64 tensors to a scalar tensor. The relative error of an
    element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    arrays = [np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in inputs]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = gradients(fn(*ts), ts)
    worst = 0.0
    for k, arr in enumerate(arrays):
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - step
            fm = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic[k]), np.abs(num)), floor)
        worst = max(worst, float(np.max(np.abs(analytic[k] - num) / denom)))
    return worst


# ---------------------------------------------------------------------------
# debug dump format: u32 rank, u32 extents, little-endian float32 payload


def dump_tensor(t, path) -> None:
    data = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(encode_array(data))


def encode_array(data: np.ndarray, dtype: str = "<f4") -> bytes:
    data = np.ascontiguousarray(data, dtype=dtype)
    header = struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes()


def decode_array(buf: bytes, offset: int = 0, dtype: str = "<f4") -> tuple[np.ndarray, int]:
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    dt = np.dtype(dtype)
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape)
    return arr.astype(dt.newbyteorder("=")), offset + dt.itemsize * count


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        arr, _ = decode_array(fh.read())
    return Tensor(arr)
