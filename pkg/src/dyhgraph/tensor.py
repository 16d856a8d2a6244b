"""Dense float64 tensors with taped reverse-mode differentiation.

Every differentiable operation computes its forward result eagerly and, when a
``Tape`` is active and an input requires gradients, records a closure that maps
the output gradient to per-input gradients.  ``backward`` replays the tape in
reverse execution order, which is a valid topological order because an
operation can only consume tensors that already exist.

Arrays are always float64.  Sparse matrices (adjacency, incidence) are wrapped
in :class:`SparseMatrix` and treated as constants: gradients flow through the
dense operand only.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ConfigurationError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "SparseMatrix",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "spmm",
    "tsum",
    "tmean",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "scatter_aggregate",
    "elementwise_unary",
    "relu",
    "sine",
    "sigmoid",
    "tanh",
    "identity",
    "leaky_relu",
    "softmax_rows",
    "segment_softmax",
    "layer_norm",
    "l2_normalize_rows",
    "dropout",
    "cross_entropy",
    "binary_cross_entropy_with_logits",
    "AdamW",
]


class Tensor:
    """A float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


GradFn = Callable[[np.ndarray], tuple]

_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Execution-ordered record of operations for one forward pass.

    Use as a context manager; operations executed inside record themselves
    when any input requires gradients.  Entries are appended in execution
    order, so every operation's inputs precede it on the tape.
    """

    def __init__(self):
        self.entries: list[tuple[tuple[Tensor, ...], Tensor, GradFn]] = []
        self._previous: "Tape | None" = None

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._previous = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._previous
        self._previous = None


def _record(inputs: tuple[Tensor, ...], out: Tensor, grad_fn: GradFn) -> Tensor:
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.entries.append((inputs, out, grad_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(tensor) to every tensor recorded on ``tape``.

    Gradients accumulate by summation, so tensors consumed by several
    operations receive the sum of all path contributions.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    loss.grad = np.ones_like(loss.data)
    for inputs, out, grad_fn in reversed(tape.entries):
        if out.grad is None:
            continue
        grads = grad_fn(out.grad)
        for tensor, grad in zip(inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.array(grad, dtype=np.float64, copy=True)
            else:
                tensor.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _CsrCache:
    """Bounded cache of scatter matrices keyed by index-array identity.

    Edge index arrays are built once per graph and reused every epoch, so the
    CSR matrix that scatters messages along them is worth keeping.  Entries
    hold a strong reference to the key array, which keeps its id() stable.
    """

    def __init__(self, maxsize: int = 512):
        self.maxsize = maxsize
        self._store: dict = {}

    def get(self, index: np.ndarray, n: int, mean: bool):
        key = (id(index), n, mean)
        hit = self._store.get(key)
        if hit is not None and hit[0] is index:
            return hit[1]
        weights = np.ones(index.shape[0])
        if mean:
            counts = np.bincount(index, minlength=n)
            weights = 1.0 / counts[index]
        mat = sp.csr_matrix(
            (weights, (index, np.arange(index.shape[0]))), shape=(n, index.shape[0])
        )
        if len(self._store) >= self.maxsize:
            self._store.pop(next(iter(self._store)))
        self._store[key] = (index, (mat, weights))
        return mat, weights


_SCATTER_CACHE = _CsrCache()


def _scatter_sum(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``index``."""
    if values.shape[0] == 0:
        return np.zeros((n,) + values.shape[1:], dtype=np.float64)
    mat, _ = _SCATTER_CACHE.get(index, n, mean=False)
    return np.asarray(mat @ values)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record((a, b), out, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _record((a, b), out, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record((a, b), out, grad_fn)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record((a,), out, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _record((a,), out, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul requires 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, grad_fn)


class SparseMatrix:
    """Constant CSR matrix with its transpose cached for backward passes."""

    def __init__(self, csr: sp.spmatrix):
        self.csr = sp.csr_matrix(csr)
        self.csr_t = self.csr.T.tocsr()

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()


def spmm(adj: SparseMatrix, x: Tensor) -> Tensor:
    if adj.shape[1] != x.data.shape[0]:
        raise DimensionError(
            f"spmm inner dimensions differ: {adj.shape} @ {x.data.shape}"
        )
    out = Tensor(np.asarray(adj.csr @ x.data))
    return _record((x,), out, lambda g: (np.asarray(adj.csr_t @ g),))


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record((a,), out, lambda g: (np.full_like(a.data, float(g)),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    return _record((a,), out, lambda g: (np.full_like(a.data, float(g) / n),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_cols needs at least one operand")
    widths = [p.data.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))

    def grad_fn(g):
        grads, start = [], 0
        for w in widths:
            grads.append(g[:, start : start + w])
            start += w
        return tuple(grads)

    return _record(tuple(parts), out, grad_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[:, start:stop].copy())

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _record((a,), out, grad_fn)


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = a.data.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(
            f"gather_rows index out of range for {n} rows: "
            f"[{index.min()}, {index.max()}]"
        )
    out = Tensor(a.data[index])
    return _record((a,), out, lambda g: (_scatter_sum(index, g, n),))


def scatter_aggregate(messages: Tensor, target_index, n: int, mode: str = "sum") -> Tensor:
    """Aggregate message rows into ``n`` output rows by target index.

    ``mode="sum"`` adds contributions; ``mode="mean"`` divides each output row
    by its message count.  Rows that receive no message stay zero.
    """
    if mode not in ("sum", "mean"):
        raise ConfigurationError(f"scatter_aggregate mode must be sum or mean, got {mode!r}")
    index = np.asarray(target_index, dtype=np.int64)
    if index.shape[0] != messages.data.shape[0]:
        raise DimensionError(
            f"scatter_aggregate got {messages.data.shape[0]} messages "
            f"but {index.shape[0]} indices"
        )
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(
            f"scatter_aggregate index out of range for {n} rows: "
            f"[{index.min()}, {index.max()}]"
        )
    if index.size == 0:
        out = Tensor(np.zeros((n, messages.data.shape[1])))
        return _record((messages,), out, lambda g: (np.zeros_like(messages.data),))
    mat, weights = _SCATTER_CACHE.get(index, n, mean=(mode == "mean"))
    out = Tensor(np.asarray(mat @ messages.data))

    def grad_fn(g):
        return (g[index] * weights[:, None],)

    return _record((messages,), out, grad_fn)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

_UNARY: dict[str, tuple[Callable, Callable]] = {
    # name -> (forward, derivative as a function of (x, y))
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "sine": (np.sin, lambda x, y: np.cos(x)),
    "sigmoid": (expit, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "identity": (lambda x: x.copy(), lambda x, y: np.ones_like(x)),
}


def elementwise_unary(a: Tensor, op: str) -> Tensor:
    if op not in _UNARY:
        raise ConfigurationError(
            f"unknown unary op {op!r}; expected one of {sorted(_UNARY)}"
        )
    fwd, deriv = _UNARY[op]
    out = Tensor(fwd(a.data))
    return _record((a,), out, lambda g: (g * deriv(a.data, out.data),))


def relu(a: Tensor) -> Tensor:
    return elementwise_unary(a, "relu")


def sine(a: Tensor) -> Tensor:
    return elementwise_unary(a, "sine")


def sigmoid(a: Tensor) -> Tensor:
    return elementwise_unary(a, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    return elementwise_unary(a, "tanh")


def identity(a: Tensor) -> Tensor:
    return elementwise_unary(a, "identity")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.data > 0, 1.0, slope)
    out = Tensor(a.data * mask)
    return _record((a,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# row-structured operations


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows requires a matrix, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=1, keepdims=True))

    def grad_fn(g):
        y = out.data
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record((a,), out, grad_fn)


def segment_softmax(logits: Tensor, segment_index, n: int) -> Tensor:
    """Softmax over rows sharing a segment id, per column.

    Used for attention: each edge carries a logit (per head), normalized over
    all edges pointing at the same target node.
    """
    index = np.asarray(segment_index, dtype=np.int64)
    x = logits.data
    if x.ndim != 2:
        raise DimensionError(f"segment_softmax expects 2-d logits, got {x.shape}")
    if index.shape[0] != x.shape[0]:
        raise DimensionError(
            f"segment_softmax got {x.shape[0]} logits but {index.shape[0]} segment ids"
        )
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"segment id out of range for {n} segments")
    seg_max = np.full((n, x.shape[1]), -np.inf)
    np.maximum.at(seg_max, index, x)
    e = np.exp(x - seg_max[index])
    denom = np.zeros((n, x.shape[1]))
    np.add.at(denom, index, e)
    out = Tensor(e / denom[index])

    def grad_fn(g):
        y = out.data
        seg_dot = np.zeros((n, x.shape[1]))
        np.add.at(seg_dot, index, g * y)
        return (y * (g - seg_dot[index]),)

    return _record((logits,), out, grad_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row (biased variance), then apply gain and bias."""
    if a.data.ndim != 2:
        raise DimensionError(f"layer_norm requires a matrix, got {a.data.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def grad_fn(g):
        g_gain = (g * xhat).sum(axis=0)
        g_bias = g.sum(axis=0)
        gx = g * gain.data
        g_a = inv * (
            gx
            - gx.mean(axis=1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )
        return g_a, g_gain.reshape(gain.data.shape), g_bias.reshape(bias.data.shape)

    return _record((a, gain, bias), out, grad_fn)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt((a.data**2).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    y = a.data / norms
    out = Tensor(y)

    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _record((a,), out, grad_fn)


def dropout(a: Tensor, p: float, training: bool, rng) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale by 1/(1-p).

    In evaluation mode the input tensor is returned unchanged and the RNG is
    not consumed, so interleaving evaluations does not perturb training
    randomness.
    """
    if not (0.0 <= p < 1.0):
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p!r}")
    if not training or p == 0.0:
        return a
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep)
    return _record((a,), out, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class indices."""
    y = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2-d logits, got {z.shape}")
    if y.shape[0] != z.shape[0]:
        raise DimensionError(
            f"cross_entropy got {z.shape[0]} rows but {y.shape[0]} labels"
        )
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise IndexError(f"class label out of range for {z.shape[1]} classes")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    out = Tensor(np.mean(lse - z[np.arange(z.shape[0]), y]))

    def grad_fn(g):
        soft = np.exp(z - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(z.shape[0]), y] -= 1.0
        return (soft * (float(g) / z.shape[0]),)

    return _record((logits,), out, grad_fn)


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross-entropy for a vector of logits and 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    z = logits.data.reshape(-1)
    if z.shape[0] != y.shape[0]:
        raise DimensionError(
            f"binary cross-entropy got {z.shape[0]} logits but {y.shape[0]} targets"
        )
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(losses.mean())

    def grad_fn(g):
        return (((expit(z) - y) * (float(g) / z.shape[0])).reshape(logits.data.shape),)

    return _record((logits,), out, grad_fn)


# ---------------------------------------------------------------------------
# optimization


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ContractError("AdamW.step called with a missing gradient")
            g = p.grad
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
