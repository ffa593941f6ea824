"""Dense 2-D tensor ops with explicit backward passes.

Every differentiable op returns ``(output, backward)`` where ``backward``
maps the upstream gradient to the gradient of the op's input and accumulates
parameter gradients in place. Arrays are plain row-major numpy matrices;
training runs in float32, finite-difference checks in float64.

Weight layout is (in, out): ``y = x @ w + b`` with ``b`` broadcast over rows.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError


class Param:
    """A 2-D weight matrix paired with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        value = np.ascontiguousarray(value)
        if value.ndim != 2:
            raise ShapeError(f"Param must be 2-D, got shape {value.shape}")
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self) -> "Param":
        return Param(self.value.copy())

    def astype(self, dtype) -> "Param":
        return Param(self.value.astype(dtype))

    def __repr__(self):
        return f"Param(shape={self.value.shape}, dtype={self.value.dtype})"


class MacCounter:
    """Accumulates multiply-accumulate counts threaded through a forward pass."""

    __slots__ = ("total",)

    def __init__(self):
        self.total = 0

    def add(self, n: int):
        self.total += int(n)


def _require_2d(name: str, x: np.ndarray):
    if not isinstance(x, np.ndarray) or x.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got "
                         f"{getattr(x, 'shape', type(x).__name__)}")


def linear(x: np.ndarray, w: Param, b: Param):
    """y = x @ w + b; backward returns dX and accumulates dW, dB."""
    _require_2d("x", x)
    if x.shape[1] != w.value.shape[0]:
        raise ShapeError(f"linear: x {x.shape} does not conform with w {w.value.shape}")
    if b.value.shape != (1, w.value.shape[1]):
        raise ShapeError(f"linear: b {b.value.shape} does not conform with w {w.value.shape}")
    y = x @ w.value + b.value

    def backward(upstream: np.ndarray) -> np.ndarray:
        if upstream.shape != y.shape:
            raise ShapeError(f"linear backward: upstream {upstream.shape} != output {y.shape}")
        w.grad += x.T @ upstream
        b.grad += upstream.sum(axis=0, keepdims=True)
        return upstream @ w.value.T

    return y, backward


def layer_norm(x: np.ndarray, gain: Param, bias: Param, eps: float = 1e-5):
    """Row-wise normalization to zero mean / unit variance, then affine."""
    _require_2d("x", x)
    if gain.value.shape != (1, x.shape[1]) or bias.value.shape != (1, x.shape[1]):
        raise ShapeError(f"layer_norm: affine shapes {gain.value.shape}/{bias.value.shape} "
                         f"do not match feature width {x.shape[1]}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)  # population variance
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.value + bias.value

    def backward(upstream: np.ndarray) -> np.ndarray:
        if upstream.shape != y.shape:
            raise ShapeError(f"layer_norm backward: upstream {upstream.shape} != output {y.shape}")
        gain.grad += (upstream * xhat).sum(axis=0, keepdims=True)
        bias.grad += upstream.sum(axis=0, keepdims=True)
        dxhat = upstream * gain.value
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    return y, backward


def softmax_rows(x: np.ndarray):
    """Numerically safe row-wise softmax (subtracts the row max)."""
    _require_2d("x", x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(upstream: np.ndarray) -> np.ndarray:
        dot = (upstream * y).sum(axis=1, keepdims=True)
        return y * (upstream - dot)

    return y, backward


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                         valid: np.ndarray | None = None,
                         counter: MacCounter | None = None):
    """Single-head scaled dot-product attention over the valid rows.

    Invalid rows are removed before any score is computed, so the valid
    rows' outputs are bitwise identical to running on physically truncated
    inputs. Invalid rows receive zero output and zero scores.

    Returns (out, backward, probs) where probs is the full (B, B) softmax
    matrix with zeros at invalid positions.
    """
    for name, a in (("q", q), ("k", k), ("v", v)):
        _require_2d(name, a)
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    n, dh = q.shape
    if valid is None:
        idx = None
        qv, kv, vv = q, k, v
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (n,):
            raise ShapeError(f"attention: mask shape {valid.shape} != ({n},)")
        if not valid.any():
            raise UsageError("attention called with an empty pool (all rows masked out)")
        if valid.all():
            idx = None
            qv, kv, vv = q, k, v
        else:
            idx = np.flatnonzero(valid)
            qv, kv, vv = q[idx], k[idx], v[idx]

    scale = 1.0 / np.sqrt(np.asarray(dh, dtype=q.dtype))
    scores = (qv @ kv.T) * scale
    probs, softmax_bwd = softmax_rows(scores)
    out_v = probs @ vv
    if counter is not None:
        counter.add(2 * qv.shape[0] * kv.shape[0] * dh)

    if idx is None:
        out = out_v
        probs_full = probs
    else:
        out = np.zeros_like(q)
        out[idx] = out_v
        probs_full = np.zeros((n, n), dtype=q.dtype)
        probs_full[np.ix_(idx, idx)] = probs

    def backward(upstream: np.ndarray) -> np.ndarray | tuple:
        du = upstream if idx is None else upstream[idx]
        dv_v = probs.T @ du
        dprobs = du @ vv.T
        dscores = softmax_bwd(dprobs) * scale
        dq_v = dscores @ kv
        dk_v = dscores.T @ qv
        if idx is None:
            return dq_v, dk_v, dv_v
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        dq[idx], dk[idx], dv[idx] = dq_v, dk_v, dv_v
        return dq, dk, dv

    return out, backward, probs_full


def relu(x: np.ndarray):
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    y = np.maximum(x, 0)
    mask = x > 0

    def backward(upstream: np.ndarray) -> np.ndarray:
        return upstream * mask

    return y, backward


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-softmax of the true class over all rows.

    Returns (loss, dlogits) with dlogits = (softmax - one_hot) / batch.
    """
    _require_2d("logits", logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    # log-softmax evaluated directly for stability
    logp = z - np.log(e.sum(axis=1, keepdims=True))
    loss = float(-logp[rows, labels].mean())
    dlogits = p.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype, copy=False)
