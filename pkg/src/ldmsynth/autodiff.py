"""Small reverse-mode differentiation tape over numpy arrays.

Only the closed set of ops needed by the view-synthesis pipeline is provided.
Every op records its parents and a backward closure; ``backward`` walks the
reachable nodes in reverse creation order, which is a valid topological order
because a node is always created after its inputs.
"""
from __future__ import annotations

import contextlib
import itertools
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ----------------------------------------------------------------------------
# op counting

_counters: list[defaultdict] = []


@contextlib.contextmanager
def count_ops():
    """Collect forward op costs (multiply-accumulates or elements touched) by op kind."""
    counter: defaultdict = defaultdict(int)
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.pop()


def _count(kind: str, n: int) -> None:
    for c in _counters:
        c[kind] += int(n)


# ----------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "id", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.id = next(_ids)
        self.op = "leaf"

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str, cost: int | None = None) -> Tensor:
    """Create an op output node. ``backward_fn(g)`` returns one gradient (or None) per parent."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out.op = op
    _count(op, data.size if cost is None else cost)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes or not t.requires_grad:
            continue
        nodes[t.id] = t
        stack.extend(t.parents)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.backward_fn is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t.parents, t.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise DimensionError(f"{t.op}: gradient shape {pg.shape} != input {p.shape}")
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg


# ----------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a: Tensor) -> Tensor:
    return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    return make(np.where(keep, a.data, np.asarray(lo, a.dtype)), (a,), lambda g: (g * keep,), "clamp_min")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return make(out, (a,), bw, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for rank {a.ndim}")
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), bw, "softmax", cost=3 * out.size)


def activation(kind: str, x: Tensor, axis: int = -1) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(np.asarray(out), (a,), bw, "sum", cost=a.data.size)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape", cost=0)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    return make(np.broadcast_to(a.data, shape).copy(), (a,),
                lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return make(np.array(out, copy=True), (a,), bw, "getitem", cost=0)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(out, ts, bw, "concat")


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make(out, ts, bw, "stack")


# ----------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b) -> Tensor:
    """[..., P, Q] x [Q, R] -> [..., P, R]; also [..., Q] x [Q, R] -> [..., R]."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    if b.ndim != 2:
        raise DimensionError(f"matmul right operand must be 2-D, got {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return make(out, (a, b), bw, "matmul", cost=a.data.size * b.shape[1])


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand contraction. Every index of an operand must also appear in the
    output or in the other operand, so the gradient is again a plain contraction."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    ins, out_s = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in out_s and c not in other for c in s):
            raise ContractError(f"einsum {spec}: reduction-only index unsupported")
    sizes = {}
    for s, t in ((sa, a), (sb, b)):
        if len(s) != t.ndim:
            raise DimensionError(f"einsum {spec}: operand rank mismatch {t.shape}")
        for c, n in zip(s, t.shape):
            if sizes.setdefault(c, n) != n:
                raise DimensionError(f"einsum {spec}: extent mismatch on {c!r}")
    out = np.einsum(spec, a.data, b.data, optimize=True)
    cost = int(np.prod(list(sizes.values())))

    def bw(g):
        return (np.einsum(f"{out_s},{sb}->{sa}", g, b.data, optimize=True),
                np.einsum(f"{out_s},{sa}->{sb}", g, a.data, optimize=True))

    return make(np.ascontiguousarray(out), (a, b), bw, "einsum", cost=cost)


# ----------------------------------------------------------------------------
# image-like ops; layout [..., H, W, C]


def _im2col3(xp: np.ndarray) -> np.ndarray:
    """[..., H+2, W+2, C] padded -> [..., H, W, 9*C] patches ordered (di, dj, c)."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(-3, -2))  # [..., H, W, C, 3, 3]
    nd = v.ndim
    order = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    *lead, H, W = v.shape[:-3]
    return np.ascontiguousarray(v.transpose(order)).reshape(*lead, H, W, 9 * xp.shape[-1])


def _pad_hw(x: np.ndarray) -> np.ndarray:
    return np.pad(x, [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)])


def conv2d_3x3(x: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded 'same' 3x3 convolution (cross-correlation) over [..., H, W, Cin]."""
    if x.ndim < 3:
        raise DimensionError(f"conv2d_3x3 expects [..., H, W, C], got {x.shape}")
    if k.shape[:3] != (3, 3, x.shape[-1]):
        raise DimensionError(f"kernel {k.shape} does not match input channels {x.shape[-1]}")
    cout = k.shape[3]
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias {bias.shape} does not match Cout {cout}")
    cin = x.shape[-1]
    cols = _im2col3(_pad_hw(x.data))
    kmat = k.data.reshape(9 * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out += bias.data

    def bw(g):
        gk = (cols.reshape(-1, 9 * cin).T @ g.reshape(-1, cout)).reshape(k.shape)
        # input gradient is the correlation of g with the spatially flipped, transposed kernel
        kflip = k.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
        gx = _im2col3(_pad_hw(g)) @ kflip
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    parents = (x, k) if bias is None else (x, k, bias)
    return make(out, parents, bw, "conv2d_3x3", cost=out.size * 9 * cin)


RMS_EPS = 1e-6


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"gain {gain.shape} does not match channels {x.shape[-1]}")
    C = x.shape[-1]
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data / r
    out = xhat * gain.data

    def bw(g):
        gxhat = g * gain.data
        gx = (gxhat - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / C) / r
        ggain = (g * xhat).reshape(-1, C).sum(axis=0)
        return gx, ggain

    return make(out, (x, gain), bw, "rms_norm", cost=3 * out.size)


def mean_pool_down2(x: Tensor) -> Tensor:
    *lead, H, W, C = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"mean_pool_down2 needs even extents, got {H}x{W}")
    out = x.data.reshape(*lead, H // 2, 2, W // 2, 2, C).mean(axis=(-4, -2))

    def bw(g):
        g4 = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2) * 0.25
        return (g4,)

    return make(out, (x,), bw, "mean_pool", cost=x.data.size)


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Align-corners-false linear interpolation matrix with edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [..., H, W, C] to [..., out_h, out_w, C]."""
    *lead, H, W, C = x.shape
    if (out_h, out_w) == (H, W):
        return x
    ry = interp_matrix(out_h, H, x.dtype)
    rx = interp_matrix(out_w, W, x.dtype)
    t = np.matmul(ry, x.data.reshape(*lead, H, W * C)).reshape(*lead, out_h, W, C)
    out = np.matmul(rx, t)

    def bw(g):
        gt = np.matmul(rx.T, g).reshape(*lead, out_h, W * C)
        return (np.matmul(ry.T, gt).reshape(x.shape),)

    cost = int(np.prod(lead, dtype=np.int64)) * C * (out_h * W + out_h * out_w) * 2
    return make(np.ascontiguousarray(out), (x,), bw, "resize", cost=cost)


def resample2(x: Tensor, mode: str, factor: float = 2.0) -> Tensor:
    if mode == "mean_pool_down2":
        return mean_pool_down2(x)
    if mode == "bilinear_up":
        if factor < 1:
            raise ValueError("bilinear_up factor must be >= 1")
        H, W = x.shape[-3], x.shape[-2]
        return resize_bilinear(x, int(round(H * factor)), int(round(W * factor)))
    raise ValueError(f"unknown resample mode {mode!r}")


# ----------------------------------------------------------------------------
# parameters


@dataclass
class InitRecord:
    kind: str  # "uniform" | "constant"
    seed: int
    scale: float


@dataclass
class ParamStore:
    """Named leaf tensors with reproducible initialisation."""

    seed: int = 0
    dtype: type = np.float32
    params: dict[str, Tensor] = field(default_factory=dict)
    inits: dict[str, InitRecord] = field(default_factory=dict)

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def uniform(self, name: str, shape: Sequence[int], fan_in: int | None = None) -> Tensor:
        if fan_in is None:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
        a = float(np.sqrt(1.0 / fan_in))
        data = self._rng(name).uniform(-a, a, size=tuple(shape))
        return self._add(name, data, InitRecord("uniform", self.seed, a))

    def constant(self, name: str, shape: Sequence[int], value: float = 0.0) -> Tensor:
        return self._add(name, np.full(tuple(shape), value), InitRecord("constant", self.seed, value))

    def _add(self, name: str, data: np.ndarray, rec: InitRecord) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(data.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        self.inits[name] = rec
        return t

    def get(self, name: str, shape: Sequence[int], init: str = "uniform", value: float = 0.0,
            fan_in: int | None = None) -> Tensor:
        """Fetch a parameter, creating it on first use."""
        t = self.params.get(name)
        if t is None:
            if init == "uniform":
                return self.uniform(name, shape, fan_in)
            return self.constant(name, shape, value)
        if t.shape != tuple(shape):
            raise DimensionError(f"parameter {name!r} has shape {t.shape}, wanted {tuple(shape)}")
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k in self.params and self.params[k].shape != v.shape:
                raise DimensionError(f"parameter {k!r}: stored {v.shape} != {self.params[k].shape}")
            t = Tensor(np.asarray(v, dtype=self.dtype).copy(), requires_grad=True)
            self.params[k] = t
            self.inits.setdefault(k, InitRecord("loaded", self.seed, 0.0))

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(self.seed, dtype)
        out.load(self.state())
        out.inits = dict(self.inits)
        return out


def parameters(ts: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in ts if t.requires_grad]
