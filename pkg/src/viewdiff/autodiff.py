"""Dense-tensor reverse-mode differentiation substrate.

Computation graphs are built define-by-run: calling an op evaluates it
immediately (that is the forward/evaluate step) and records a backward
closure. ``backward(loss)`` then fills ``.grad`` on every reachable node.
The op set is deliberately small: exactly what the embedding/diffusion/
predictor stacks need. All data is float64; stochastic routines receive an
explicit numpy Generator.

``grad_check`` verifies any scalar-valued graph against central finite
differences on a sampled subset of parameter coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError

LOG_EPS = 1e-12
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise ShapeError("div: only division by a python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents,
                  _backward=backward_fn if req else None)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(_as_tensor(a), float(b))
    if isinstance(a, (int, float)):
        return scale(_as_tensor(b), float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data * s

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _node(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _node(out, (a, b), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}") from exc
    ax = axis if axis >= 0 else out.ndim + axis
    offsets = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * out.ndim
                sl[ax] = slice(lo, hi)
                _accum(p, g[tuple(sl)])

    return _node(out, tuple(parts), backward)


def slice_(a: Tensor, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            _accum(a, full)

    return _node(np.ascontiguousarray(out), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _node(out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _node(out, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _node(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# lookup / pooling ops


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[idx[...]]."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError(f"embedding: index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            kernels.scatter_add_rows(gt, idx.ravel(),
                                     np.ascontiguousarray(g.reshape(-1, table.shape[1])))
            _accum(table, gt)

    return _node(out, (table,), backward)


def segment_sum(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum-pool rows of ``x`` into ``num_segments`` buckets (empty -> zeros)."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"segment_sum: expected 2-D rows, got {x.shape}")
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_sum: ids {seg.shape} vs rows {x.shape[0]}")
    out = np.zeros((num_segments, x.shape[1]), dtype=np.float64)
    if x.shape[0]:
        kernels.scatter_add_rows(out, seg, np.ascontiguousarray(x.data))

    def backward(g):
        if x.requires_grad:
            _accum(x, g[seg])

    return _node(out, (x,), backward)


def select_positions(x: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """Gather rows (batch_idx[i], pos_idx[i], :) from a (B, T, D) tensor."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"select_positions: expected 3-D input, got {x.shape}")
    b = np.asarray(batch_idx, dtype=np.int64)
    t = np.asarray(pos_idx, dtype=np.int64)
    out = x.data[b, t]
    B, T, D = x.shape

    def backward(g):
        if x.requires_grad:
            flat = np.zeros((B * T, D), dtype=np.float64)
            kernels.scatter_add_rows(flat, b * T + t, np.ascontiguousarray(g))
            _accum(x, flat.reshape(B, T, D))

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, _as_tensor(a).ndim - 1):
        raise ShapeError("softmax: only the last axis is supported")
    a = _as_tensor(a)
    y2 = kernels.softmax_rows(_rows(a.data))
    out = y2.reshape(a.shape)

    def backward(g):
        if a.requires_grad:
            gx = kernels.softmax_rows_grad(y2, _rows(g))
            _accum(a, gx.reshape(a.shape))

    return _node(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = LN_EPS) -> Tensor:
    """Pre-affine normalization of the last axis: (x - mean) / sqrt(var + eps)."""
    a = _as_tensor(a)
    y2, inv_std = kernels.layer_norm_rows(_rows(a.data), eps)
    out = y2.reshape(a.shape)

    def backward(g):
        if a.requires_grad:
            gx = kernels.layer_norm_rows_grad(y2, inv_std, _rows(g))
            _accum(a, gx.reshape(a.shape))

    return _node(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped to >= 1e-12."""
    a = _as_tensor(a)
    clamped = np.maximum(a.data, LOG_EPS)
    out = np.log(clamped)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / clamped)

    return _node(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            _accum(a, g * da)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Squared-error loss; gradients flow into both operands."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if reduction == "mean":
        w = 1.0 / pred.data.size
    elif reduction == "sum":
        w = 1.0
    else:
        raise DomainError(f"mse: unknown reduction {reduction!r}")
    out = np.asarray((diff * diff).sum() * w)

    def backward(g):
        gd = 2.0 * w * diff * g
        if pred.requires_grad:
            _accum(pred, gd)
        if target.requires_grad:
            _accum(target, -gd)

    return _node(out, (pred, target), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Multi-label binary cross entropy from logits (numerically stable)."""
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} vs targets {y.shape}")
    x = logits.data
    elems = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    if reduction == "mean":
        w = 1.0 / x.size
    elif reduction == "sum":
        w = 1.0
    else:
        raise DomainError(f"bce_with_logits: unknown reduction {reduction!r}")
    out = np.asarray(elems.sum() * w)

    def backward(g):
        if logits.requires_grad:
            p = np.empty_like(x)
            pos = x >= 0
            p[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            p[~pos] = ex / (1.0 + ex)
            _accum(logits, g * w * (p - y))

    return _node(out, (logits,), backward)


def ce_with_logits(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Categorical cross entropy for integer labels over the last axis of 2-D logits."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"ce_with_logits: expected (N, C) logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if lab.shape != (n,):
        raise ShapeError(f"ce_with_logits: labels {lab.shape} vs logits {logits.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise DomainError("ce_with_logits: label outside [0, C)")
    x = logits.data
    mx = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - mx).sum(axis=1)) + mx[:, 0]
    per = lse - x[np.arange(n), lab]
    if reduction == "mean":
        w = 1.0 / n
    elif reduction == "sum":
        w = 1.0
    else:
        raise DomainError(f"ce_with_logits: unknown reduction {reduction!r}")
    out = np.asarray(per.sum() * w)

    def backward(g):
        if logits.requires_grad:
            p = kernels.softmax_rows(np.ascontiguousarray(x))
            p[np.arange(n), lab] -= 1.0
            _accum(logits, g * w * p)

    return _node(out, (logits,), backward)


# ---------------------------------------------------------------------------
# attention

NEG_BIG = -1e9


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              causal: bool = False, key_valid: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over (B, T, D) inputs.

    ``key_valid`` is an optional (B, T) boolean mask; False keys are excluded.
    Composed from primitive ops, so the backward pass needs no extra code.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: bad shapes {q.shape}, {k.shape}, {v.shape}")
    B, T, D = q.shape
    if D % n_heads:
        raise ShapeError(f"attention: width {D} not divisible by {n_heads} heads")
    dh = D // n_heads

    def split(x):
        return transpose(reshape(x, (B, T, n_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if causal:
        bias = np.where(np.tril(np.ones((T, T), dtype=bool)), 0.0, NEG_BIG)
        scores = add(scores, constant(bias))
    if key_valid is not None:
        bias = np.where(np.asarray(key_valid, dtype=bool), 0.0, NEG_BIG)
        scores = add(scores, constant(bias[:, None, None, :]))
    weights = softmax(scores)
    out = matmul(weights, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (B, T, D))


# ---------------------------------------------------------------------------
# backward pass and parameter plumbing


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into ``.grad``."""
    if loss.data.size != 1:
        raise DomainError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class ParamStore:
    """Named trainable tensors; insertion order fixes checkpoint layout."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise DomainError(f"parameter {name!r} already registered")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for n, t in self._params.items():
            if n not in arrays:
                raise DomainError(f"missing parameter {n!r} in checkpoint")
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ShapeError(f"parameter {n!r}: expected {t.data.shape}, got {a.shape}")
            t.data = a.copy()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward from ``loss`` and collect per-parameter gradients."""
    backward(loss)
    out = {}
    for n, t in params.items():
        out[n] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
    return out


# ---------------------------------------------------------------------------
# finite-difference verification


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    n_checked: int
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(build_loss: Callable[[], Tensor], params: Mapping[str, Tensor],
               rng: np.random.Generator, tolerance: float = 1e-4,
               eps: float = 1e-5, sample_frac: float = 0.01,
               min_coords: int = 16) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``build_loss`` must be a deterministic closure over the current parameter
    values (fix any noise/indices outside). A random >=``min_coords`` sample
    of each parameter's coordinates is probed.
    """
    for t in params.values():
        t.grad = None
    analytic = gradients(build_loss(), params)

    report = GradCheckReport(0.0, None, 0, tolerance)
    for name, tensor in params.items():
        flat = tensor.data.ravel()
        n = flat.size
        if n == 0:
            continue
        k = min(n, max(min_coords, int(math.ceil(sample_frac * n))))
        coords = rng.choice(n, size=k, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            lp = float(build_loss().data)
            flat[c] = orig - eps
            lm = float(build_loss().data)
            flat[c] = orig
            fd = (lp - lm) / (2.0 * eps)
            err = rel_err(float(analytic[name].ravel()[c]), fd)
            worst = max(worst, err)
            report.n_checked += 1
        report.per_param[name] = worst
        if worst > report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    return report
