"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: the op set is the minimal closure needed by a compact
encoder-decoder transformer (matmul, add, mul, scale, relu, sum, masked
softmax, layer norm, embedding lookup, head split/concat, cross entropy).
Everything is float64 so numerical checks stay tight, and all ops are
deterministic: identical inputs produce bit-identical outputs.
"""

from __future__ import annotations

import json
from contextlib import contextmanager

import numpy as np

CHECKPOINT_VERSION = 1

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional record of the op that produced it.

    ``data`` is always a float64 ndarray. After ``backward()`` on a scalar
    loss, ``grad`` holds d(loss)/d(self) for every tensor with
    ``requires_grad=True`` that the loss depends on.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Copy of the value with no graph link; safe to hand to other threads."""
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add g into t.grad. own=True hands over a freshly allocated array
    (no view, no other holder), letting the first accumulation skip a copy."""
    if t.requires_grad:
        if t.grad is None:
            if own and g.shape == t.data.shape:
                t.grad = g
            else:
                t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
        else:
            t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (undo numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with requires_grad=True.

    ``loss`` must be a scalar (a single element).
    """
    if loss.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
    # Topological order by iterative post-order walk.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b, alpha: float | None = None) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast.

    ``alpha``, when given, scales the product (fused, cheaper than a
    separate scale node).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data
    if alpha is not None:
        data *= alpha

    if b.ndim == 2 and a.ndim > 2:
        # Stacked-by-plain case (projections): one flat GEMM for the weight
        # gradient instead of a stack of small ones plus a reduction.
        def grad_fn(g):
            if alpha is not None:
                g = g * alpha
            k = a.shape[-1]
            if a.requires_grad:
                _accum(a, g @ b.data.T, own=True)
            if b.requires_grad:
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]), own=True)
    else:
        def grad_fn(g):
            if alpha is not None:
                g = g * alpha
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ _swap(b.data), a.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(_swap(a.data) @ g, b.shape), own=True)

    return _node(data, (a, b), grad_fn)


def matmul_nt(a, b, alpha: float | None = None) -> Tensor:
    """a @ b^T over the last two axes (attention-score pattern).

    Fusing the transpose keeps every gradient GEMM on contiguous operands.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ValueError(f"matmul_nt dimension mismatch: {a.shape} x {b.shape}^T")
    data = a.data @ _swap(b.data)
    if alpha is not None:
        data *= alpha

    def grad_fn(g):
        if alpha is not None:
            g = g * alpha
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data, a.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(_swap(g) @ a.data, b.shape), own=True)

    return _node(data, (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def grad_fn(g):
        ga = _unbroadcast(g, a.shape)
        _accum(a, ga, own=ga is not g)
        gb = _unbroadcast(g, b.shape)
        _accum(b, gb, own=gb is not g)

    return _node(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product (broadcasting allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape), own=True)

    return _node(data, (a, b), grad_fn)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient w.r.t. ``s``)."""
    a = as_tensor(a)
    s = float(s)
    data = a.data * s

    def grad_fn(g):
        _accum(a, g * s, own=True)

    return _node(data, (a,), grad_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    data = np.where(keep, a.data, 0.0)

    def grad_fn(g):
        _accum(a, g * keep, own=True)

    return _node(data, (a,), grad_fn)


def tsum(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def grad_fn(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(np.float64), own=True)

    return _node(data, (a,), grad_fn)


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ValueError(f"transpose_last2 needs >=2 dims, got shape {a.shape}")

    def grad_fn(g):
        _accum(a, _swap(g))

    return _node(_swap(a.data), (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def grad_fn(g):
        _accum(a, g.reshape(a.shape))

    return _node(data, (a,), grad_fn)


def split_heads(a, n_heads: int) -> Tensor:
    """(..., T, d) -> (..., H, T, d // H)."""
    a = as_tensor(a)
    d = a.shape[-1]
    if d % n_heads != 0:
        raise ValueError(f"model width {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    data = np.swapaxes(a.data.reshape(*a.shape[:-1], n_heads, dk), -2, -3)

    def grad_fn(g):
        ga = np.swapaxes(g, -2, -3).reshape(a.shape)
        _accum(a, ga, own=ga.base is None)

    return _node(data, (a,), grad_fn)


def concat_heads(a) -> Tensor:
    """(..., H, T, dk) -> (..., T, H * dk); inverse of split_heads."""
    a = as_tensor(a)
    if a.ndim < 3:
        raise ValueError(f"concat_heads needs >=3 dims, got shape {a.shape}")
    h, t, dk = a.shape[-3], a.shape[-2], a.shape[-1]
    data = np.swapaxes(a.data, -2, -3).reshape(*a.shape[:-3], t, h * dk)

    def grad_fn(g):
        ga = np.ascontiguousarray(np.swapaxes(g.reshape(*a.shape[:-3], t, h, dk), -2, -3))
        _accum(a, ga, own=ga.base is None)

    return _node(data, (a,), grad_fn)


def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the last axis with entries at mask==0 forced to exactly 0.

    ``mask`` is a 0/1 array broadcastable to ``scores`` (an AttentionMask is
    also accepted). Masking adds -1e9 before normalization; in float64 the
    masked exponentials underflow to +0.0, and an explicit multiply by the
    mask pins them there, so masked positions contribute exactly nothing.
    """
    s = as_tensor(scores)
    m = np.asarray(getattr(mask, "matrix", mask), dtype=np.float64)
    if np.any(m.sum(axis=-1) == 0):
        raise ValueError("degenerate mask: some row allows no positions")
    z = s.data + (m - 1.0) * 1e9
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z *= m  # pin masked entries to exactly 0.0
    z /= z.sum(axis=-1, keepdims=True)
    p = z

    def grad_fn(g):
        gz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        _accum(s, _unbroadcast(gz, s.shape), own=True)

    return _node(p, (s,), grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    data = xn * gain.data + bias.data

    def grad_fn(g):
        gxn = g * gain.data
        gx = inv * (
            gxn
            - gxn.mean(axis=-1, keepdims=True)
            - xn * (gxn * xn).mean(axis=-1, keepdims=True)
        )
        _accum(x, gx, own=True)
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xn, gain.shape), own=True)
        gb = _unbroadcast(g, bias.shape)
        _accum(bias, gb, own=gb is not g)

    return _node(data, (x, gain, bias), grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids of any shape -> ids.shape + (d,)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of range for vocabulary of size {v}")
    data = table.data[ids]

    def grad_fn(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accum(table, gt, own=True)

    return _node(data, (table,), grad_fn)


def cross_entropy(logits, targets, pos_mask=None, label_smoothing: float = 0.0) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under ``logits``.

    logits: (..., T, V); targets: int array (..., T). Positions where
    ``pos_mask`` is 0 are excluded (padding). Returns the scalar sum over the
    remaining positions; divide by ``pos_mask.sum()`` for the per-token mean.
    With label smoothing ls, the target distribution per position is
    (1-ls) * onehot + ls / V.
    """
    lg = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != lg.shape[:-1]:
        raise ValueError(f"targets shape {t.shape} does not match logits {lg.shape}")
    v = lg.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range for vocabulary of size {v}")
    if pos_mask is None:
        m = np.ones(t.shape, dtype=np.float64)
    else:
        m = np.asarray(pos_mask, dtype=np.float64)
        if m.shape != t.shape:
            raise ValueError(f"position mask shape {m.shape} does not match targets {t.shape}")
    ls = float(label_smoothing)

    x = lg.data
    xmax = x.max(axis=-1, keepdims=True)
    lse = xmax + np.log(np.exp(x - xmax).sum(axis=-1, keepdims=True))
    logp = x - lse
    nll = -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    if ls:
        per_pos = (1.0 - ls) * nll - (ls / v) * logp.sum(axis=-1)
    else:
        per_pos = nll
    total = np.asarray((per_pos * m).sum())

    def grad_fn(g):
        if not lg.requires_grad:
            return
        p = np.exp(logp)
        q = np.zeros_like(p)
        np.put_along_axis(q, t[..., None], 1.0, axis=-1)
        if ls:
            q = (1.0 - ls) * q + ls / v
        _accum(lg, float(g) * (p - q) * m[..., None], own=True)

    return _node(total, (lg,), grad_fn)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a format-version field; values round-trip bit-exact."""
    payload = {f"arr::{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__version__"] = np.asarray(CHECKPOINT_VERSION)
    payload["__meta__"] = np.frombuffer(json.dumps(meta or {}).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        version = int(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        meta = json.loads(bytes(z["__meta__"].tobytes()).decode("utf-8"))
        arrays = {k[len("arr::"):]: z[k] for k in z.files if k.startswith("arr::")}
    return arrays, meta
