"""Dense N-d tensors with reverse-mode automatic differentiation.

Arrays are stored as numpy buffers; every differentiable primitive records a
:class:`Node` holding its inputs and a backward rule.  :func:`backward` orders
the recorded nodes into a :class:`GradTape` and replays it in reverse.

Volumes use the channel-second layout ``(N, C, H, W, D)``.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward: Callable  # grad_out -> sequence of grads (or None) per input


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if any(e < 1 for e in arr.shape):
            # Zero extents are allowed only for the empty-channel case in concat.
            if not (arr.ndim >= 2 and arr.shape[1] == 0 and all(e >= 1 for i, e in enumerate(arr.shape) if i != 1)):
                raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor.  Gradients accumulate with ``+=`` until zeroed."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``data`` and record a node if any input needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), rule)
    return out


def _check_dtypes(*ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise TypeError(f"mixed dtypes in one graph: {sorted(d.name for d in dts)}")


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcasting is supported)")


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scalar_add(a, b)
    b = as_tensor(b)
    _check_same_shape("add", a, b)
    _check_dtypes(a, b)
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scalar_add(a, -b)
    b = as_tensor(b)
    _check_same_shape("sub", a, b)
    _check_dtypes(a, b)
    return make_result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scalar_mul(a, b)
    b = as_tensor(b)
    _check_same_shape("mul", a, b)
    _check_dtypes(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scalar_mul(a, 1.0 / b)
    b = as_tensor(b)
    _check_same_shape("div", a, b)
    _check_dtypes(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, "div", (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, "neg", (a,), lambda g: (-g,))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return make_result(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def scalar_add(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return make_result(a.data + c, "scalar_add", (a,), lambda g: (g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(ad * ad, "square", (a,), lambda g: (2 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate axes in {tuple(axes)}")
    return tuple(sorted(out))


def reduce_sum(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in ax else e for i, e in enumerate(shape))
    out = np.sum(x.data, axis=ax, keepdims=keepdims)

    def rule(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), "sum", (x,), rule)


def reduce_mean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[i] for i in ax])) if ax else 1
    return scalar_mul(reduce_sum(x, ax, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Channel-axis ops
# ---------------------------------------------------------------------------

def concat_channels(a, b) -> Tensor:
    """Concatenate along axis 1; ``a`` occupies channels ``[0, Ca)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ShapeError(f"concat_channels: non-channel extents differ {a.shape} vs {b.shape}")
    _check_dtypes(a, b)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def softmax_channels(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p, "softmax", (x,), rule)


def log_softmax_channels(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return make_result(out, "log_softmax", (x,), rule)


def upsample_nearest(x, factor: int) -> Tensor:
    """Repeat every spatial voxel ``factor`` times along H, W and D."""
    x = as_tensor(x)
    if factor == 1:
        return x
    out = x.data
    for ax in (2, 3, 4):
        out = np.repeat(out, factor, axis=ax)
    n, c, h, w, d = x.shape

    def rule(g):
        g = g.reshape(n, c, h, factor, w, factor, d, factor)
        return (g.sum(axis=(3, 5, 7)),)

    return make_result(out, "upsample_nearest", (x,), rule)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

@dataclass
class GradTape:
    """Topologically ordered record of the nodes behind one output.

    Each entry is the tensor a node produced; inputs always precede the ops
    that consume them.
    """

    entries: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                # reversed so that inputs are expanded in argument order
                for inp in reversed(t._node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [t._node.op for t in self.entries if t._node is not None]


def backward(loss: Tensor, tape: GradTape | None = None) -> GradTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients use ``+=`` semantics; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = tape or GradTape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.entries):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype, copy=True)
            else:
                t.grad += g
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    return tape


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def _scalar_of(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(-1)[0]) if np.size(v) == 1 else float(v)


def finite_diff_grad(f: Callable, x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    arr = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True)
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar_of(f(Tensor(arr.copy())))
            flat[i] = orig - h
            fm = _scalar_of(f(Tensor(arr.copy())))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8, abs_tol: float = 1e-7) -> float:
    """Worst relative error, with tiny entries compared on an absolute scale.

    Entries whose analytic magnitude is below ``floor`` are judged on
    ``|a - n| <= abs_tol`` instead; any such miss reports 1.0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    small = np.abs(a) < floor
    rel = np.where(small, 0.0, diff / np.where(small, 1.0, scale))
    worst = float(rel.max(initial=0.0))
    if small.any():
        # an absolute miss is reported as a relative miss of the same severity
        abs_worst = float(diff[small].max())
        if abs_worst > abs_tol:
            worst = max(worst, 1.0)
    return worst


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"UXT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _DTYPE_CODES:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    head = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 6 or buf[:4] != TENSOR_MAGIC:
        raise ValueError("not a UXT1 tensor buffer")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    off = 6
    if len(buf) < off + 8 * rank:
        raise ValueError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dt = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - off != count * dt.itemsize:
        raise ValueError(f"tensor buffer holds {len(buf) - off} bytes, expected {count * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return Tensor(arr.astype(_CODE_DTYPES[code]))


def save_tensor(t, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def zeros(shape: Iterable[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype))


def ones(shape: Iterable[int], dtype=np.float32) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype))
