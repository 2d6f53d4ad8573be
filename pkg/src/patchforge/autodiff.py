"""Dense tensors with tape-based reverse-mode differentiation.

Covers exactly the primitives the two model families need: affine maps,
elementwise arithmetic, concatenation, row gather/scatter, segment sums,
relu, row-wise layer norm, dropout, and the three losses (softmax
cross-entropy, mean absolute error, cosine similarity).

Usage::

    with Tape() as tape:
        loss = op_chain(...)
    grads = tape.backward(loss)        # {Tensor: ndarray}

Ops executed outside a ``with Tape()`` block run forward-only. Gradients
accumulate by addition across fan-out, and the backward walk visits the
records in exact reverse execution order.
"""

from __future__ import annotations

import numpy as np

from .kernels import segment_sum_rows

DEFAULT_DTYPE = np.float32

NORM_FLOOR = 1e-12  # cosine-similarity guard against zero vectors


class Tensor:
    """A dense float array plus differentiation metadata.

    ``requires_grad`` marks trainable leaves; it propagates through every
    primitive. Rank is limited to 2 (plus scalars), which is all the
    batched graph math needs.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 3:
            raise ValueError(f"tensors are limited to rank 3, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def param(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs: tuple, vjp) -> None:
        self._records.append((out, inputs, vjp))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> dict:
        """Reverse sweep from a scalar loss; returns {Tensor: gradient}."""
        if loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self._records):
            g = adjoint.get(id(out))
            if g is None:
                continue
            grads = vjp(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gi
                else:
                    adjoint[key] = gi
                    holders[key] = inp
        return {holders[k]: v for k, v in adjoint.items()}


def _tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(out_data, inputs: tuple, vjp) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), vjp)


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit(out, (a, b), vjp)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _emit(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(out, (a, b), vjp)


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, tuple(ts), vjp)


def gather(x, rows) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(rows, dtype=np.int64)
    out = x.data[idx]

    def vjp(g):
        if x.data.ndim == 1:
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g)
            return (dx,)
        return (segment_sum_rows(np.ascontiguousarray(g), idx, x.data.shape[0]),)

    return _emit(out, (x,), vjp)


def segment_sum(x, segment_ids, num_segments: int) -> Tensor:
    x = _as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    out = segment_sum_rows(np.ascontiguousarray(x.data), seg, num_segments)

    def vjp(g):
        return (g[seg],)

    return _emit(out, (x,), vjp)


def reduce_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum()

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)

    return _emit(out, (x,), vjp)


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out = x.data.mean() if n else np.zeros((), dtype=x.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype),)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation

def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _emit(out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise layer norm over the last axis with learnable gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.shape[-1] != gain.data.shape[-1] or x.data.shape[-1] != bias.data.shape[-1]:
        raise ValueError(
            f"layer_norm width mismatch: x {x.data.shape}, gain {gain.data.shape}, bias {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        d = x.data.shape[-1]
        m1 = dxhat.sum(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = inv * (dxhat - (m1 + xhat * m2) / d)
        return dx.astype(x.data.dtype, copy=False), dgain, dbias

    return _emit(out, (x, gain, bias), vjp)


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; surviving entries are scaled by 1/(1-p)."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = x.data * mask

    def vjp(g):
        return (g * mask,)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    logits = _as_tensor(logits)
    lab = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or lab.shape != (logits.data.shape[0],):
        raise ValueError(
            f"softmax_cross_entropy expects [N,C] logits and [N] labels, got {logits.data.shape} / {lab.shape}"
        )
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = -logp[np.arange(n), lab].mean()

    def vjp(g):
        soft = np.exp(logp)
        soft[np.arange(n), lab] -= 1.0
        return ((g / n) * soft,)

    return _emit(out.astype(logits.data.dtype), (logits,), vjp)


def mean_absolute_error(pred, target) -> Tensor:
    """Mean |pred - target| over all elements; d/dx sign(0) = 0."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mae shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.abs(diff).mean()

    def vjp(g):
        s = (g / n) * np.sign(diff)
        return s.astype(pred.data.dtype), (-s).astype(target.data.dtype)

    return _emit(out.astype(pred.data.dtype), (pred, target), vjp)


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity; [N,d] inputs give [N], vectors a scalar.

    Norms are floored at 1e-12 so zero vectors stay finite.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"cosine shape mismatch: {a.data.shape} vs {b.data.shape}")
    na = np.maximum(np.linalg.norm(a.data, axis=-1, keepdims=True), NORM_FLOOR)
    nb = np.maximum(np.linalg.norm(b.data, axis=-1, keepdims=True), NORM_FLOOR)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)
    out = np.squeeze(cos, axis=-1)

    def vjp(g):
        gk = np.expand_dims(g, -1)
        da = gk * (b.data / (na * nb) - cos * a.data / (na * na))
        db = gk * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return da.astype(a.data.dtype), db.astype(b.data.dtype)

    return _emit(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# gradient checking

def gradcheck(function, parameters, epsilon: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``function`` must be a deterministic closure returning a scalar
    Tensor (re-seed any rng substreams inside). Run it with float64
    parameters; float32 cannot see epsilon=1e-6.
    """
    with Tape() as tape:
        loss = function()
    grads = tape.backward(loss)
    worst = 0.0
    for p in parameters:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(function().data)
            flat[i] = orig - epsilon
            lo = float(function().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
