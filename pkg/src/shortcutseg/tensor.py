"""Dense tensors with tape-based reverse-mode autodiff.

Only the operators a small U-Net needs are provided: padding in four modes,
cross-correlation, 2x max pooling, 2x nearest upsampling, a handful of
elementwise ops and reductions.  Arrays are ``float32`` by default; any op
applied to ``float64`` inputs stays in ``float64`` (used by gradient checks).

Every tensor produced by an op gets a monotonically increasing creation
index.  :func:`backward` visits the reachable nodes in strictly decreasing
creation order, which is a valid reverse topological order because an op's
inputs always exist before its output.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, UsageError

__all__ = [
    "PaddingMode",
    "Tensor",
    "tensor",
    "pad2d",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
    "crop2d",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "div",
    "concat_channels",
    "tsum",
    "mean",
    "reshape",
    "backward",
    "finite_diff_grad",
    "no_grad",
]

_creation = itertools.count()
_state = threading.local()


@contextmanager
def no_grad():
    """Disable tape recording in the current thread (inference)."""
    prev = getattr(_state, "enabled", True)
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class PaddingMode(str, Enum):
    ZEROS = "zeros"
    REFLECT = "reflect"
    REPLICATE = "replicate"
    VALID = "valid"

    @classmethod
    def parse(cls, value) -> "PaddingMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise UsageError(f"unknown padding mode {value!r} (expected one of {names})") from None


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """An n-d float array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._index = next(_creation)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op}{flag})"

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

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if getattr(_state, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DomainError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# padding


def _check_spatial(t: Tensor, opname: str) -> None:
    if t.ndim not in (3, 4):
        raise DomainError(f"{opname} expects [C,H,W] or [B,C,H,W], got shape {t.shape}")


def _pad_sources(n: int, width: int, mode: PaddingMode) -> list[tuple[int, int]]:
    """(padded index, source index) pairs for the border cells of one axis."""
    pairs = []
    for i in range(width):
        lo, hi = width - 1 - i, n + width + i
        if mode is PaddingMode.REFLECT:
            pairs.append((lo, i + 1))
            pairs.append((hi, n - 2 - i))
        else:
            pairs.append((lo, 0))
            pairs.append((hi, n - 1))
    return pairs


def pad2d(t: Tensor, mode=PaddingMode.ZEROS, width: int = 1) -> Tensor:
    """Pad the two trailing (spatial) axes by ``width`` on every side."""
    mode = PaddingMode.parse(mode)
    t = _lift(t)
    _check_spatial(t, "pad2d")
    width = int(width)
    if width < 0:
        raise DomainError(f"pad2d: negative width {width}")
    if mode is PaddingMode.VALID or width == 0:
        return t
    h, w = t.shape[-2:]
    if mode is PaddingMode.REFLECT and (width >= h or width >= w):
        raise DomainError(f"pad2d: reflect width {width} needs width < H={h} and width < W={w}")
    spec = [(0, 0)] * (t.ndim - 2) + [(width, width), (width, width)]
    np_mode = {PaddingMode.ZEROS: "constant", PaddingMode.REFLECT: "reflect",
               PaddingMode.REPLICATE: "edge"}[mode]
    out = np.pad(t.data, spec, mode=np_mode)

    def _back(g):
        if mode is PaddingMode.ZEROS:
            return (np.ascontiguousarray(g[..., width:width + h, width:width + w]),)
        # fold rows first (over the full padded width), then columns
        rows = g[..., width:width + h, :].copy()
        for dst, src in _pad_sources(h, width, mode):
            rows[..., src, :] += g[..., dst, :]
        cols = rows[..., width:width + w].copy()
        for dst, src in _pad_sources(w, width, mode):
            cols[..., src] += rows[..., dst]
        return (cols,)

    return _node(out, (t,), _back, f"pad2d[{mode.value}]")


def crop2d(t: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    t = _lift(t)
    _check_spatial(t, "crop2d")
    h, w = t.shape[-2:]
    if top < 0 or left < 0 or top + height > h or left + width > w or height <= 0 or width <= 0:
        raise DomainError(f"crop2d: window ({top},{left},{height},{width}) outside {h}x{w}")
    out = np.ascontiguousarray(t.data[..., top:top + height, left:left + width])

    def _back(g):
        full = np.zeros_like(t.data)
        full[..., top:top + height, left:left + width] = g
        return (full,)

    return _node(out, (t,), _back, "crop2d")


# ----------------------------------------------------------------------------
# convolution


def _im2col_nhwc(xh: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Rows = output pixels (b, y, x); columns = (ky, kx, c)."""
    win = sliding_window_view(xh, (k, k), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    rows = win.shape[0] * win.shape[1] * win.shape[2]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(rows, -1)


def _conv_valid(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    b, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise DomainError(f"conv2d: weight {weight.shape} does not match input channels {c}")
    if h < k or w < k:
        raise DomainError(f"conv2d: input {h}x{w} smaller than kernel {k}x{k}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    # channel-last im2col keeps the big operand row-major on the left of the GEMM
    cols = _im2col_nhwc(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), k, stride)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    def _back(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gf = gh.reshape(b * ho * wo, o)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gf.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        gb = None
        if bias is not None and bias.requires_grad:
            gb = gf.sum(axis=0, dtype=np.float64).astype(bias.data.dtype)
        gx = None
        if x.requires_grad:
            if stride > 1:
                dil = np.zeros((b, (ho - 1) * stride + 1, (wo - 1) * stride + 1, o), dtype=gh.dtype)
                dil[:, ::stride, ::stride] = gh
                gh = dil
            # full correlation of the output gradient with the flipped kernel
            ph, pw = h - gh.shape[1], w - gh.shape[2]
            gpad = np.pad(gh, ((0, 0), (k - 1, ph), (k - 1, pw), (0, 0)))
            gcols = _im2col_nhwc(gpad, k, 1)
            wfull = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
            gx = np.ascontiguousarray((gcols @ wfull).reshape(b, h, w, c).transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, _back, "conv2d")


def conv2d(input: Tensor, weight: Tensor, bias: Tensor | None = None,
           mode=PaddingMode.ZEROS, pad: int | None = None, stride: int = 1) -> Tensor:
    """Cross-correlate ``input`` ([C,H,W] or [B,C,H,W]) with ``weight`` [Cout,Cin,k,k].

    ``pad`` defaults to ``(k-1)//2`` (same-size output) and is forced to 0
    for ``PaddingMode.VALID``.  Padding is an explicit :func:`pad2d` node, so
    a padded convolution is exactly ``pad2d`` followed by a valid one.
    """
    mode = PaddingMode.parse(mode)
    x, weight = _lift(input), _lift(weight)
    bias = _lift(bias) if bias is not None else None
    _check_spatial(x, "conv2d")
    if weight.ndim != 4:
        raise DomainError(f"conv2d: weight must be [Cout,Cin,k,k], got {weight.shape}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise DomainError(f"conv2d: kernel size must be odd, got {k}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DomainError(f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")
    stride = int(stride)
    if stride < 1:
        raise DomainError(f"conv2d: stride must be >= 1, got {stride}")
    pad = 0 if mode is PaddingMode.VALID else ((k - 1) // 2 if pad is None else int(pad))
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if pad:
        x = pad2d(x, mode, pad)
    out = _conv_valid(x, weight, bias, stride)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


# ----------------------------------------------------------------------------
# pooling / upsampling


def maxpool2d(t: Tensor, factor: int = 2) -> Tensor:
    t = _lift(t)
    _check_spatial(t, "maxpool2d")
    if factor != 2:
        raise DomainError("maxpool2d only supports factor 2")
    h, w = t.shape[-2:]
    if h % 2 or w % 2:
        raise DomainError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    lead = t.shape[:-2]
    blocks = t.data.reshape(lead + (h // 2, 2, w // 2, 2))
    blocks = np.moveaxis(blocks, -3, -2).reshape(lead + (h // 2, w // 2, 4))
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def _back(g):
        # ties route the gradient to the first maximal element only
        gb = np.zeros(lead + (h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = np.moveaxis(gb.reshape(lead + (h // 2, w // 2, 2, 2)), -2, -3)
        return (gb.reshape(t.shape),)

    return _node(out, (t,), _back, "maxpool2d")


def upsample_nearest(t: Tensor, factor: int = 2) -> Tensor:
    t = _lift(t)
    _check_spatial(t, "upsample_nearest")
    if factor != 2:
        raise DomainError("upsample_nearest only supports factor 2")
    h, w = t.shape[-2:]
    out = np.repeat(np.repeat(t.data, 2, axis=-2), 2, axis=-1)

    def _back(g):
        lead = g.shape[:-2]
        return (g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return _node(out, (t,), _back, "upsample_nearest")


# ----------------------------------------------------------------------------
# elementwise


def relu(t: Tensor) -> Tensor:
    t = _lift(t)
    pos = t.data > 0
    out = np.maximum(t.data, 0)
    return _node(out, (t,), lambda g: (g * pos,), "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(t: Tensor) -> Tensor:
    t = _lift(t)
    s = _stable_sigmoid(t.data)
    return _node(s, (t,), lambda g: (g * s * (1 - s),), "sigmoid")


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def _back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), _back, "div")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis ([C,H,W] axis 0, [B,C,H,W] axis 1)."""
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise DomainError("concat_channels: nothing to concatenate")
    ndim = tensors[0].ndim
    if ndim not in (3, 4) or any(t.ndim != ndim for t in tensors):
        raise DomainError("concat_channels: all inputs must share rank 3 or 4")
    axis = ndim - 3
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[:axis] != ref[:axis] or t.shape[axis + 1:] != ref[axis + 1:]:
            raise DomainError(f"concat_channels: shape mismatch {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _back(g):
        return tuple(np.ascontiguousarray(np.take(g, range(lo, hi), axis=axis))
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(out, tensors, _back, "concat")


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    t = _lift(t)
    out = t.data.reshape(tuple(shape))
    return _node(out, (t,), lambda g: (g.reshape(t.shape),), "reshape")


def tsum(t: Tensor) -> Tensor:
    """Sum of all elements (accumulated in float64) as a 0-d tensor."""
    t = _lift(t)
    out = np.asarray(t.data.sum(dtype=np.float64), dtype=t.data.dtype)
    return _node(out, (t,), lambda g: (np.broadcast_to(g, t.shape).astype(t.data.dtype),), "sum")


def mean(t: Tensor) -> Tensor:
    t = _lift(t)
    n = t.data.size
    out = np.asarray(t.data.sum(dtype=np.float64) / n, dtype=t.data.dtype)
    return _node(out, (t,), lambda g: (np.full(t.shape, g / n, dtype=t.data.dtype),), "mean")


# ----------------------------------------------------------------------------
# differentiation


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._index, reverse=True)
    return nodes


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None
             ) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar ``loss``; return gradients by tensor name.

    Leaf tensors reached from ``loss`` get their ``.grad`` overwritten.  If
    ``params`` is given, every listed tensor appears in the result and those
    not connected to ``loss`` receive a zero gradient.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if isinstance(params, Mapping):
        named = dict(params)
    elif params is not None:
        named = {p.name or f"t{p._index}": p for p in params}
    else:
        named = None

    grads: dict[int, np.ndarray] = {}
    leaves: list[Tensor] = []
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in _reachable(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    if named is None:
        return {(n.name or f"t{n._index}"): n.grad for n in leaves}
    reached = {id(n) for n in leaves}
    out = {}
    for name, p in named.items():
        if id(p) in reached:
            out[name] = p.grad
        else:
            p.grad = np.zeros_like(p.data)
            out[name] = p.grad
    return out


def finite_diff_grad(f: Callable[[Tensor], Tensor], t: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to every element of ``t``.

    ``t.data`` is perturbed in place and restored after each probe.
    """
    if eps <= 0:
        raise UsageError("finite_diff_grad: eps must be positive")
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(t).data)
        flat[i] = orig - eps
        lo = float(f(t).data)
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(t.shape)
