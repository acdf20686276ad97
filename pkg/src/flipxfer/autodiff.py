"""Dense float64 tensors with a define-by-run reverse-mode tape.

The op set is deliberately small: affine, relu, 3x3 conv (stride 1 or 2,
zero same-padding), global average pooling, seeded train-mode dropout,
log_softmax, mean/weighted reductions, plus a few glue ops the loss
functions need (scale, add, gather, row normalization, gram matrix).
Everything runs on numpy in float64; a Tape records ops in creation order,
which is already topological, and one backward sweep visits each node once.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "SgdState",
    "sgd_step",
    "np_log_softmax",
    "np_softmax",
    "affine",
    "matmul",
    "add",
    "scale",
    "relu",
    "conv2d",
    "global_avg_pool",
    "dropout",
    "log_softmax",
    "mean",
    "weighted_sum",
    "gather_cols",
    "l2_normalize_rows",
    "gram",
    "reshape",
]


class ShapeError(ValueError):
    """Operand shapes do not conform; records the op name and the shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NonFiniteError(ValueError):
    """A value that must be finite is not; names the offending quantity."""

    def __init__(self, what: str):
        self.what = what
        super().__init__(f"non-finite value in {what}")


class Tensor:
    """Immutable-by-convention float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: "callable"


class Tape:
    """Append-only op record; creation order doubles as topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tls.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tls.stack.pop()
        assert popped is self
        return False


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_tls = _TapeStack()


def _active_tape() -> Tape | None:
    return _tls.stack[-1] if _tls.stack else None


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a batch-size-invariant summation order.

    BLAS gemm picks different kernels (and so different float rounding) for
    different shapes; einsum's fixed reduction order makes row i of a@b
    independent of how many other rows ride along in the batch.
    """
    return np.einsum("ij,jk->ik", a, b)


def _mm_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a.T @ b with the same determinism guarantee."""
    return np.einsum("ji,jk->ik", a, b)


def _mm_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b.T with the same determinism guarantee."""
    return np.einsum("ij,kj->ik", a, b)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    """Run one reverse sweep over the tape, filling .grad on tracked tensors.

    The loss must be a scalar node produced under this tape.
    """
    if loss.data.shape != ():
        raise ShapeError("backward(loss)", loss.data.shape, ())
    for node in tape.nodes:
        node.out.grad = None
        for t in node.inputs:
            t.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.out.grad is None:
            continue  # branch not contributing to the loss
        node.backward(node.out.grad)


# ---------------------------------------------------------------------------
# numpy helpers shared by tape ops and frozen-model code paths


def np_log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def np_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(np_log_softmax(z, axis=axis))


# ---------------------------------------------------------------------------
# ops


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError("affine", x.data.shape, w.data.shape)
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError("affine(bias)", b.data.shape, (w.data.shape[1],))
    out_data = _mm(x.data, w.data) + b.data

    def bwd(g):
        _accum(x, _mm_nt(g, w.data))
        _accum(w, _mm_tn(x.data, g))
        _accum(b, g.sum(axis=0))

    return _record(out_data, (x, w, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)

    def bwd(g):
        _accum(a, _mm_nt(g, b.data))
        _accum(b, _mm_tn(a.data, g))

    return _record(_mm(a.data, b.data), (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("add", a.data.shape, b.data.shape)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _record(a.data + b.data, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)

    def bwd(g):
        _accum(x, g * s)

    return _record(x.data * s, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0

    def bwd(g):
        _accum(x, g * mask)

    return _record(np.where(mask, x.data, 0.0), (x,), bwd)


def _im2col(xp: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    i0 = np.repeat(np.arange(3), 3)
    j0 = np.tile(np.arange(3), 3)
    i1 = stride * np.repeat(np.arange(oh), ow)
    j1 = stride * np.tile(np.arange(ow), oh)
    rows = i0[:, None] + i1[None, :]  # (9, oh*ow)
    cols = j0[:, None] + j1[None, :]
    patches = xp[:, :, rows, cols]  # (n, c, 9, oh*ow)
    return patches.transpose(0, 3, 1, 2).reshape(n * oh * ow, c * 9)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution, zero same-padding, stride 1 or 2."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4:
        raise ShapeError("conv2d(input)", x.data.shape, ("n", "c", "h", "w"))
    n, cin, h, wdt = x.data.shape
    if w.data.ndim != 4 or w.data.shape[1:] != (cin, 3, 3):
        raise ShapeError("conv2d(kernel)", w.data.shape, (x.data.shape))
    cout = w.data.shape[0]
    if b.data.shape != (cout,):
        raise ShapeError("conv2d(bias)", b.data.shape, (cout,))
    oh = (h + 2 - 3) // stride + 1
    ow = (wdt + 2 - 3) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, oh, ow)  # (n*oh*ow, cin*9)
    wmat = w.data.reshape(cout, cin * 9)
    out = (_mm_nt(cols, wmat) + b.data).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
        _accum(w, _mm_tn(gmat, cols).reshape(cout, cin, 3, 3))
        _accum(b, gmat.sum(axis=0))
        if x.requires_grad:
            gcols = _mm(gmat, wmat)  # (n*oh*ow, cin*9)
            gxp = np.zeros_like(xp)
            gpatches = gcols.reshape(n, oh * ow, cin, 9).transpose(0, 2, 3, 1)
            i0 = np.repeat(np.arange(3), 3)
            j0 = np.tile(np.arange(3), 3)
            i1 = stride * np.repeat(np.arange(oh), ow)
            j1 = stride * np.tile(np.arange(ow), oh)
            rows = i0[:, None] + i1[None, :]
            colsix = j0[:, None] + j1[None, :]
            np.add.at(gxp, (slice(None), slice(None), rows, colsix), gpatches)
            _accum(x, gxp[:, :, 1 : 1 + h, 1 : 1 + wdt])

    return _record(out, (x, w, b), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.data.shape, ("n", "c", "h", "w"))
    n, c, h, w = x.data.shape

    def bwd(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _record(x.data.mean(axis=(2, 3)), (x,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; train-mode only, callers skip it in eval mode."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0,1), got {rate}")
    keep = rng.random(x.data.shape) >= rate
    scale_ = 1.0 / (1.0 - rate)

    def bwd(g):
        _accum(x, g * keep * scale_)

    return _record(x.data * keep * scale_, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    out_data = np_log_softmax(x.data, axis=axis)
    soft = np.exp(out_data)

    def bwd(g):
        _accum(x, g - soft * g.sum(axis=axis, keepdims=True))

    return _record(out_data, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    size = x.data.size

    def bwd(g):
        _accum(x, np.full(x.data.shape, float(g) / size))

    return _record(x.data.mean(), (x,), bwd)


def weighted_sum(x: Tensor, weights: np.ndarray, bias: float = 0.0) -> Tensor:
    """Scalar sum(weights * x) + bias with constant weights."""
    x = _as_tensor(x)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.data.shape:
        raise ShapeError("weighted_sum", weights.shape, x.data.shape)

    def bwd(g):
        _accum(x, weights * float(g))

    return _record(np.sum(weights * x.data) + bias, (x,), bwd)


def gather_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick idx[i, j] columns per row: out[i, j] = x[i, idx[i, j]]."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if x.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.data.shape[0]:
        raise ShapeError("gather_cols", x.data.shape, idx.shape)
    rows = np.arange(x.data.shape[0])[:, None]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(rows, idx.shape), idx), g)
        _accum(x, gx)

    return _record(x.data[rows, idx], (x,), bwd)


def l2_normalize_rows(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("l2_normalize_rows", x.data.shape, ("n", "d"))
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize_rows: zero-norm row")
    y = x.data / norms

    def bwd(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        _accum(x, (g - y * dot) / norms)

    return _record(y, (x,), bwd)


def gram(x: Tensor) -> Tensor:
    """x @ x.T in one node so the self-product gradient stays simple."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("gram", x.data.shape, ("n", "d"))

    def bwd(g):
        _accum(x, _mm(g + g.T, x.data))

    return _record(_mm_nt(x.data, x.data), (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape

    def bwd(g):
        _accum(x, g.reshape(old))

    return _record(x.data.reshape(shape), (x,), bwd)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    """SGD with classic momentum and decay folded into the gradient."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: SgdState) -> None:
    """v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v."""
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of parameter {name!r}")
        if g.shape != p.data.shape:
            raise ShapeError(f"sgd_step({name})", g.shape, p.data.shape)
        v = state.velocity.get(name)
        upd = g if state.weight_decay == 0.0 else g + state.weight_decay * p.data
        v = upd if v is None else state.momentum * v + upd
        state.velocity[name] = v
        p.data = p.data - state.lr * v
