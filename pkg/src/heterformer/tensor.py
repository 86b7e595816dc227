"""Dense float64 tensors with reverse-mode differentiation.

Everything in the model reduces to the primitives here.  Operations are
plain functions over :class:`Tensor`; when a :class:`Tape` is active and at
least one input is tracked, each op records a backward closure so that
:func:`backward` can accumulate gradients by replaying the tape in reverse.
Shapes may carry arbitrary leading batch dimensions; reductions and
normalizations act on the last axis.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    ``tracked`` marks leaves (parameters) that should receive gradients.
    Outputs of recorded ops are tracked automatically so the chain is
    connected; gradients are only *retained* on tensors, never required.
    """

    __slots__ = ("data", "grad", "tracked")

    def __init__(self, data, tracked=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.tracked = bool(tracked)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g, own=False):
        # ``own=True`` promises ``g`` is a freshly allocated buffer that the
        # caller will not reuse, so it can become the gradient directly.
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"


def tensor(data):
    return Tensor(data, tracked=False)


def param(data):
    return Tensor(data, tracked=True)


# ---------------------------------------------------------------------------
# Tape


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; ops executed inside the block are recorded
    when any of their inputs is tracked.  Replaying in reverse accumulates
    each tensor's gradient exactly once per use.
    """

    def __init__(self):
        self.records = []  # list of (output Tensor, backward closure)

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False


def _record(inputs, out, backward_fn):
    """Mark ``out`` tracked and record ``backward_fn`` if a tape is active."""
    if _ACTIVE_TAPES and any(t.tracked for t in inputs):
        out.tracked = True
        _ACTIVE_TAPES[-1].records.append((out, backward_fn))
    return out


def backward(loss, tape):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``."""
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for out, fn in reversed(tape.records):
        if out.grad is None:
            continue
        fn(out.grad)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and arithmetic primitives


def add(a, b):
    out = Tensor(a.data + b.data)

    def back(g):
        if a.tracked:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.tracked:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _record((a, b), out, back)


def sub(a, b):
    out = Tensor(a.data - b.data)

    def back(g):
        if a.tracked:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.tracked:
            b._accumulate(-_unbroadcast(g, b.data.shape))

    return _record((a, b), out, back)


def mul(a, b):
    out = Tensor(a.data * b.data)

    def back(g):
        if a.tracked:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), own=True)
        if b.tracked:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), own=True)

    return _record((a, b), out, back)


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c)

    def back(g):
        if a.tracked:
            a._accumulate(g * c, own=True)

    return _record((a,), out, back)


def gelu(x):
    """Tanh-approximation GELU, applied elementwise."""
    c = math.sqrt(2.0 / math.pi)
    x2 = x.data * x.data
    t = np.tanh(c * (x.data + 0.044715 * x2 * x.data))
    out = Tensor(0.5 * x.data * (1.0 + t))

    def back(g):
        if x.tracked:
            du = c * (1.0 + 3 * 0.044715 * x2)
            dydx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x._accumulate(g * dydx, own=True)

    return _record((x,), out, back)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b):
    """Matrix product with numpy batching on leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def back(g):
        if a.tracked:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape), own=True)
        if b.tracked:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape), own=True)

    return _record((a, b), out, back)


def transpose_last(a):
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def back(g):
        if a.tracked:
            a._accumulate(np.swapaxes(g, -1, -2))

    return _record((a,), out, back)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))

    def back(g):
        if a.tracked:
            a._accumulate(g.reshape(a.data.shape))

    return _record((a,), out, back)


def concat(tensors, axis):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.tracked:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _record(tuple(tensors), out, back)


def narrow(a, axis, start, length):
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def back(g):
        if a.tracked:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full, own=True)

    return _record((a,), out, back)


def index_rows(a, idx):
    """Gather rows along axis 0: out[i...] = a[idx[i...]].

    Gradient scatter-adds, so repeated indices accumulate correctly.
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError(
            f"index out of range: [{idx.min()}, {idx.max()}] for table of {a.data.shape[0]} rows")
    out = Tensor(a.data[idx])

    def back(g):
        if a.tracked:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full, own=True)

    return _record((a,), out, back)


# ---------------------------------------------------------------------------
# Reductions and normalizations


def sum_all(a):
    out = Tensor(a.data.sum())

    def back(g):
        if a.tracked:
            a._accumulate(np.full_like(a.data, g), own=True)

    return _record((a,), out, back)


def mean_all(a):
    n = a.data.size
    out = Tensor(a.data.mean())

    def back(g):
        if a.tracked:
            a._accumulate(np.full_like(a.data, g / n), own=True)

    return _record((a,), out, back)


def masked_softmax(logits, mask):
    """Softmax over the last axis with boolean validity ``mask``.

    Masked positions come out exactly zero and receive exactly zero
    gradient.  Rows are stabilized by max-subtraction over the unmasked
    entries.  A fully masked row is a contract violation.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.data.shape)
    if not m.any(axis=-1).all():
        raise ContractError("masked_softmax: at least one row is fully masked")
    x = np.where(m, logits.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(x), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def back(g):
        if logits.tracked:
            inner = (g * y).sum(axis=-1, keepdims=True)
            logits._accumulate(y * (g - inner), own=True)

    return _record((logits,), out, back)


def layer_norm(x, gamma, beta, eps=1e-12):
    """Layer normalization over the last axis, then affine (gamma, beta)."""
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature width {x.data.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def back(g):
        if beta.tracked:
            beta._accumulate(_unbroadcast(g, beta.data.shape))
        if gamma.tracked:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape), own=True)
        if x.tracked:
            gx = g * gamma.data
            mean_gx = gx.mean(axis=-1, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - mean_gx - xhat * mean_gx_xhat) * inv, own=True)

    return _record((x, gamma, beta), out, back)


def in_batch_cross_entropy(scores):
    """Mean InfoNCE loss over a square score matrix with diagonal positives.

    ``scores[i, j]`` is the query-i / key-j score; the key paired with each
    query sits on the diagonal.  Row-stabilized log-sum-exp.
    """
    s = scores.data
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"expected a square score matrix, got {s.shape}")
    n = s.shape[0]
    if n < 2:
        raise ContractError("in-batch loss needs batch size >= 2")
    mx = s.max(axis=-1, keepdims=True)
    e = np.exp(s - mx)
    z = e.sum(axis=-1, keepdims=True)
    lse = np.log(z) + mx
    out = Tensor((lse[:, 0] - np.diagonal(s)).mean())

    def back(g):
        if scores.tracked:
            soft = e / z
            scores._accumulate(g * (soft - np.eye(n)) / n, own=True)

    return _record((scores,), out, back)


# ---------------------------------------------------------------------------
# Gradient checking


class GradCheckError(RuntimeError):
    """The function under check produced non-finite values."""


def grad_check(f, inputs, h=1e-5, tol=1e-4, floor=1e-8):
    """Compare analytic gradients of ``f(*inputs)`` to central differences.

    ``f`` must be a deterministic scalar-valued function of the given
    tensors.  Returns a report dict with ``max_rel_err`` and ``passed``.
    Relative error uses the absolute ``floor`` in the denominator; raise it
    for deep compositions whose smallest gradients sit below the roundoff
    noise of the central difference itself.
    """
    for t in inputs:
        t.tracked = True
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
    if not np.isfinite(loss.data):
        raise GradCheckError("function value is not finite")
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_rel = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError("perturbed function value is not finite")
            num = (fp - fm) / (2 * h)
            a = ana.reshape(-1)[i]
            denom = max(abs(a), abs(num), floor)
            max_rel = max(max_rel, abs(a - num) / denom)
    return {"max_rel_err": max_rel, "passed": max_rel < tol}


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
