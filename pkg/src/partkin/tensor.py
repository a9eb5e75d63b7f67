"""Dense f64 tensors with reverse-mode automatic differentiation.

Covers exactly the operations the attention network and its losses need:
matmul, elementwise arithmetic, transpose/reshape/concat/slice/gather,
softmax, layer_norm, gelu, the three loss primitives, l2_normalize, and a
decoupled-weight-decay Adam step.  Everything is float64 and a tensor's
data buffer is treated as immutable once created.

Gradients are recorded on an explicit :class:`GradTape`.  A tape and the
tensors it records are confined to one thread while recording; finished
tensors are plain immutable values and can be shared freely.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_LOCAL = threading.local()

CHECKPOINT_MAGIC = b"PTWT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _shape_error(op: str, *shapes) -> ShapeError:
    described = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {described}")


class Tensor:
    """A dense float64 array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        hook = getattr(_LOCAL, "alloc_hook", None)
        if hook is not None:
            hook(arr.shape)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Wengert list of recorded ops; reverse traversal yields gradients.

    Records are appended in execution order, which is a valid topological
    order of the computation DAG, so a single reversed pass visits each
    node exactly once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        if getattr(_LOCAL, "tape", None) is not None:
            raise RuntimeError("a GradTape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = None
        return False

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self._records.append((out, tuple(parents), backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(x) into ``x.grad`` for every tensor on the tape."""
        if root.data.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for out, parents, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = backward(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if out.requires_grad:
                out.grad = g if out.grad is None else out.grad + g
        for _, parents, _ in self._records:
            for parent in parents:
                if parent.requires_grad and id(parent) in grads:
                    pg = grads.pop(id(parent))
                    parent.grad = pg if parent.grad is None else parent.grad + pg


def active_tape() -> Optional[GradTape]:
    return getattr(_LOCAL, "tape", None)


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(out, parents, backward)
    return out


class allocation_audit:
    """Context manager collecting the shape of every tensor allocated inside.

    Used by tests to assert the network never materializes quadratic
    point-point intermediates.
    """

    def __init__(self):
        self.shapes: list[tuple[int, ...]] = []

    def __enter__(self):
        _LOCAL.alloc_hook = self.shapes.append
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.alloc_hook = None
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise _shape_error("add", a.shape, b.shape)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise _shape_error("sub", a.shape, b.shape)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports 2-D x 2-D, batched 3-D x 3-D with equal batch dims, and
    3-D x 2-D (shared weight matrix applied over a batch).
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or not (
        ad.shape[-1] == bd.shape[-2]
        and (ad.ndim == bd.ndim == 2
             or (ad.ndim == bd.ndim == 3 and ad.shape[0] == bd.shape[0])
             or (ad.ndim == 3 and bd.ndim == 2))
    ):
        raise _shape_error("matmul", a.shape, b.shape)
    out = Tensor(ad @ bd)

    def backward(g):
        if ad.ndim == 3 and bd.ndim == 2:
            ga = g @ bd.T
            gb = np.einsum("bik,bij->kj", ad, g)
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in ts])
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows (axis 0) by integer index; duplicate indices accumulate grads."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# nonlinearities and normalizations


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return _record(out, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-form GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _record(out, (a,), backward)


def layer_norm(a, gamma, beta, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize along one axis, then scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    try:
        out = Tensor(xhat * gamma.data + beta.data)
    except ValueError:
        raise _shape_error("layer_norm", a.shape, gamma.shape)
    n = x.shape[axis]

    def backward(g):
        g_gamma = _unbroadcast(g * xhat, gamma.shape)
        g_beta = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=axis, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=axis, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return _record(out, (a, gamma, beta), backward)


def l2_normalize(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Scale rows to unit Euclidean norm; rows with norm <= eps divide by eps."""
    if eps <= 0:
        raise ValueError("l2_normalize: eps must be positive")
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom
    out = Tensor(y)

    def backward(g):
        gx = g / denom
        active = norm > eps
        corr = (g * y).sum(axis=axis, keepdims=True) / denom
        gx = gx - np.where(active, corr, 0.0) * y
        return (gx,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_error("l1_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    out = Tensor(np.abs(diff).mean())
    n = diff.size

    def backward(g):
        s = g * np.sign(diff) / n
        return s, -s

    return _record(out, (pred, target), backward)


def cross_entropy(logits, target_index) -> Tensor:
    """Mean softmax cross-entropy; rows of `logits` against integer class ids."""
    logits = as_tensor(logits)
    idx = np.asarray(target_index, dtype=np.int64)
    if logits.ndim != 2 or idx.shape != (logits.shape[0],):
        raise _shape_error("cross_entropy", logits.shape, idx.shape)
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    rows = np.arange(x.shape[0])
    losses = lse[:, 0] - x[rows, idx]
    out = Tensor(losses.mean())

    def backward(g):
        p = np.exp(x - lse)
        p[rows, idx] -= 1.0
        return (g * p / x.shape[0],)

    return _record(out, (logits,), backward)


def binary_cross_entropy(logits, target) -> Tensor:
    """Mean BCE with logits; numerically stable for large |x|."""
    logits, target = as_tensor(logits), as_tensor(target)
    if logits.shape != target.shape:
        raise _shape_error("binary_cross_entropy", logits.shape, target.shape)
    x, t = logits.data, target.data
    losses = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(losses.mean())
    n = x.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return g * (sig - t) / n, g * (-x) / n

    return _record(out, (logits, target), backward)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> bool:
    """One decoupled-weight-decay Adam update in place.

    Reads each parameter's ``.grad`` (missing grad = zero).  If any gradient
    is non-finite the step is skipped entirely and False is returned; the
    step counter only advances on applied steps.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return True


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from the current parameter values on
    each call.  Relative error uses max(1, |a|, |b|) in the denominator so
    near-zero gradients are compared absolutely.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            ad = grad.reshape(-1)[i]
            rel = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: magic "PTWT", version u32, count u32, then per tensor
# (name_len u32, name bytes utf-8, rank u32, dims u32 each, f64 payload),
# all little-endian.  Round trips are bit-exact.


def save_weights(path, params: dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_weights(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a weight checkpoint: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        params[name] = Tensor(data.copy(), requires_grad=True)
    if offset != len(blob):
        raise ValueError("trailing bytes after last tensor in checkpoint")
    return params
