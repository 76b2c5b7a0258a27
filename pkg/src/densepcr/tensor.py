"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations executed inside an active :class:`Tape` are recorded together with
their backward rules; :func:`backward` replays the tape in reverse.  Outside a
tape every op is a plain numpy computation.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "tape",
    "active_tape",
    "backward",
    "record",
    "affine",
    "relu",
    "max_over_rows",
    "segment_max",
    "concat_cols",
    "tile_rows",
    "gather_rows",
    "conv2d",
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "sum_all",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_ids = itertools.count()
_local = threading.local()


class Tensor:
    """A row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node_id = next(_ids)
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tape(self) -> Optional["Tape"]:
        return self._tape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate leaf gradients, then release the records (a tape is single-use)."""
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape (or backward already ran)")
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {r.output.node_id for r in self.records}
        leaves: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and t.node_id not in produced:
                    leaves[t.node_id] = t

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for r in reversed(self.records):
            g = grads.pop(r.output.node_id, None)
            if g is None:
                continue
            for t, gi in zip(r.inputs, r.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        for nid, leaf in leaves.items():
            g = grads.get(nid)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
        # records -> outputs -> tape is a cycle; break it so activations are freed now
        for r in self.records:
            r.output._tape = None
        self.records.clear()


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def tape() -> Iterator[Tape]:
    """Record differentiable ops issued in this thread into a fresh tape."""
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    t = Tape()
    stack.append(t)
    try:
        yield t
    finally:
        stack.pop()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf of the tape that produced ``loss``."""
    if loss._tape is None:
        raise ValueError("loss has no tape; run the forward pass inside `with tape():`")
    loss._tape.backward(loss)


def record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap ``out_data`` as a tensor and log it on the active tape.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    input.  Nothing is logged when no tape is active or no input needs grad.
    """
    out = Tensor._wrap(out_data)
    tp = active_tape()
    if tp is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tp
        tp.records.append(_Record(tuple(inputs), out, backward_fn))
    return out


def _require_2d(t: Tensor, name: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {t.shape}")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``x @ w + b``: one shared linear layer applied to every row."""
    _require_2d(x, "x")
    _require_2d(w, "w")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"w: expected {x.shape[1]} input rows to match x, got shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"b: expected shape ({w.shape[1]},), got {b.shape}")
    X, W = x.data, w.data

    def bw(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return record(X @ W + b.data, (x, w, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return record(np.where(mask, x.data, 0.0), (x,), bw)


def max_over_rows(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Column-wise max; gradient flows to the first row attaining it."""
    _require_2d(x, "x")
    n, d = x.shape
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(d)
    out = x.data[arg, cols]

    def bw(g):
        gx = np.zeros((n, d))
        gx[arg, cols] = g
        return (gx,)

    return record(out, (x,), bw), arg


def segment_max(x: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Max over each contiguous block of ``k`` rows: [n*k x d] -> [n x d]."""
    _require_2d(x, "x")
    if k < 1 or x.shape[0] % k:
        raise DimensionError(f"row count {x.shape[0]} is not a multiple of block size {k}")
    n, d = x.shape[0] // k, x.shape[1]
    blocks = x.data.reshape(n, k, d)
    arg = np.argmax(blocks, axis=1)
    rows = np.arange(n)[:, None] * k + arg
    cols = np.arange(d)[None, :]
    out = x.data[rows, cols]

    def bw(g):
        gx = np.zeros(x.shape)
        gx[rows, cols] = g
        return (gx,)

    return record(out, (x,), bw), arg


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols needs at least one part")
    for i, p in enumerate(parts):
        _require_2d(p, f"parts[{i}]")
    n = parts[0].shape[0]
    for i, p in enumerate(parts):
        if p.shape[0] != n:
            raise DimensionError(f"parts[{i}] has {p.shape[0]} rows, expected {n}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def tile_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each row ``k`` times; copies of row i land at rows k*i .. k*i+k-1."""
    _require_2d(x, "x")
    if k < 1:
        raise ValueError(f"tile factor must be >= 1, got {k}")
    n, d = x.shape

    def bw(g):
        return (g.reshape(n, k, d).sum(axis=1),)

    return record(np.repeat(x.data, k, axis=0), (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    _require_2d(x, "x")
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)

    def bw(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return record(x.data[idx], (x,), bw)


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    A, B = a.data, b.data
    return record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    return record(x.data * c, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(src),))


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),))


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of a [c_in x h x w] image with [c_out x c_in x k x k] kernels."""
    if x.data.ndim != 3:
        raise DimensionError(f"x must be [c_in x h x w], got shape {x.shape}")
    if kernels.data.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be [c_out x c_in x k x k], got shape {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, k, _ = kernels.shape
    if kc != c_in:
        raise DimensionError(f"kernels expect {kc} input channels, x has {c_in}")
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias: expected shape ({c_out},), got {bias.shape}")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"non-positive output extent {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]  # c_in, ho, wo, k, k
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * k * k)
    wmat = kernels.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.T).reshape(c_out, ho, wo)

    def bw(g):
        gf = g.reshape(c_out, ho * wo)
        gw = (gf @ cols).reshape(kernels.shape)
        gcols = (gf.T @ wmat).reshape(ho, wo, c_in, k, k)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j].transpose(2, 0, 1)
        gx = gxp[:, padding:padding + h, padding:padding + w]
        gb = gf.sum(axis=1) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, kernels, bias) if bias is not None else (x, kernels)
    return record(out, inputs, bw)
