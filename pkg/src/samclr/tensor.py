"""Small reverse-mode autodiff engine on top of numpy float64 arrays.

Operations are recorded on the active :class:`Tape` (see ``with Tape():``).
Outside a tape nothing is recorded, which is what inference code wants.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tape_id(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


@dataclass
class _Op:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; creation order is a topological order."""

    ops: list[_Op] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, inputs, output, backward) -> None:
        output._node = len(self.ops)
        self.ops.append(_Op(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node >= len(self.ops) or self.ops[loss._node].output is not loss:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops[: loss._node + 1]):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is not None and t._node < len(self.ops) and self.ops[t._node].output is t:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    # leaf (parameter or input)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    tape = current_tape()
    if tape is None:
        raise ValueError("backward called outside of a tape")
    tape.backward(loss)


def _result(data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    tape = current_tape()
    if needs and tape is not None:
        out.requires_grad = True
        tape.record(inputs, out, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_UNARY = {"relu": relu, "negate": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, negate, scale."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, _wrap(b))
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- reductions and shape ------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def logsumexp_rows(a: Tensor, exclude: np.ndarray | None = None) -> Tensor:
    """log(sum_k exp(a[i, k])) per row, skipping entries where ``exclude`` is True."""
    x = a.data
    if exclude is not None:
        x = np.where(exclude, -np.inf, x)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    softmax = e / s

    def bwd(g):
        return (softmax * g[:, None],)

    return _result(out, (a,), bwd)


def pick(a: Tensor, cols: np.ndarray) -> Tensor:
    """Row-wise gather: out[i] = a[i, cols[i]]."""
    rows = np.arange(a.shape[0])
    cols = np.asarray(cols)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g
        return (full,)

    return _result(a.data[rows, cols], (a,), bwd)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation. x: N×C×H×W, k: F×C×kh×kw."""
    if stride < 1:
        raise ValueError("stride must be positive")
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {k.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    if h < kh or w < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    # windows: N×C×Ho×Wo×kh×kw
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = k.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dk = (g2.T @ cols).reshape(k.shape) if k.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        return dx, dk

    return _result(np.ascontiguousarray(out), (x, k), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    return _result(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt((v.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norms < eps):
        raise ValueError("degenerate embedding: row norm below 1e-12")
    u = v.data / norms

    def bwd(g):
        # (I - u uᵀ) g / ||v||
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / norms,)

    return _result(u, (v,), bwd)


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """Apply one in-place Adam update to ``params``; returns ``state`` (mutated)."""
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"SAMCLRCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: Iterable[tuple[str, np.ndarray]]) -> None:
    items = [(name, np.asarray(arr, dtype="<f8")) for name, arr in params]
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(items))
    for name, arr in items:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            out[name] = arr.astype(DTYPE)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
