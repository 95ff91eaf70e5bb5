"""Reverse-mode automatic differentiation over dense float64 arrays.

A minimal define-by-run engine: each operation returns a new Tensor that
records its input tensors and a closure that pushes the output gradient back
to them.  `backward()` topologically sorts the captured graph and runs the
closures once each.

Conventions:
- everything is float64; integer/bool inputs are converted on construction,
- shapes are checked eagerly and mismatches raise ShapeError; there is no
  general broadcasting,
- a leading batch dimension is supported only where documented (matmul,
  linear, and the row-wise ops), with fixed semantics,
- masks are plain numpy bool arrays, never Tensors, and never receive
  gradients.

Leaf tensors created with requires_grad=True allocate a zero .grad up front,
so a parameter that ends up disconnected from the loss reports an exactly
zero gradient rather than None.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateMaskError, NumericError, ShapeError

Array = np.ndarray


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self, grad: Array | None = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        Without an explicit seed gradient the tensor must be scalar-sized.
        Gradients accumulate into .grad of every requires_grad tensor in the
        captured graph; call zero_grad on leaves between uses.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without seed gradient needs a scalar, got {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"seed gradient shape {grad.shape} != tensor shape {self.shape}"
                )
        graph = trace(self)
        _accumulate(self, grad)
        for node in reversed(graph.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Intermediate grads are only needed while walking the graph.
        for node in graph.nodes:
            if node._backward is not None:
                node.grad = None

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    # Sugar used by model code; everything routes through the checked ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, mul_const(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul_const(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class ComputeGraph:
    """Topologically ordered view of the graph below a root tensor.

    nodes: inputs-before-outputs order; the root is last.
    leaves: requires_grad tensors in the graph with no recorded parents.
    """

    nodes: list[Tensor]
    leaves: list[Tensor]


def trace(root: Tensor) -> ComputeGraph:
    """Collect the reachable graph once per tensor (iterative, fanout-safe)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child_idx = stack.pop()
        if child_idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if child_idx < len(node._parents):
            stack.append((node, child_idx + 1))
            child = node._parents[child_idx]
            if id(child) not in seen:
                stack.append((child, 0))
        else:
            order.append(node)
    leaves = [t for t in order if t.requires_grad and not t._parents]
    return ComputeGraph(nodes=order, leaves=leaves)


def _accumulate(t: Tensor, g: Array) -> None:
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _swap_last2(a: Array) -> Array:
    return np.swapaxes(a, -1, -2)


def _check_const(x: Tensor, c) -> Array:
    carr = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(x.shape, carr.shape) != x.shape:
        raise ShapeError(
            f"constant of shape {carr.shape} does not broadcast within {x.shape}"
        )
    return carr


# ---------------------------------------------------------------------------
# elementwise / scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def backward(g: Array) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def backward(g: Array) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def add_const(x: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (scalar or array that broadcasts
    within x's shape)."""
    carr = _check_const(x, c)

    def backward(g: Array) -> None:
        _accumulate(x, g)

    return _make(x.data + carr, (x,), backward)


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a non-differentiable constant (scalar or array that
    broadcasts within x's shape). Used for masking and fixed coefficients."""
    carr = _check_const(x, c)

    def backward(g: Array) -> None:
        _accumulate(x, g * carr)

    return _make(x.data * carr, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g: Array) -> None:
        _accumulate(x, g * y * (1.0 - y))

    return _make(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        _accumulate(x, g * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), backward)


def log(x: Tensor) -> Tensor:
    """Natural log; caller guarantees strictly positive inputs."""
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")

    def backward(g: Array) -> None:
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g: Array) -> None:
        _accumulate(x, g * y)

    return _make(y, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the range
    (inclusive) and is zero outside."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g: Array) -> None:
        _accumulate(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supported ranks: 2@2, 3@2, 2@3, 3@3 (leading batch
    dims must agree); inner dims must match exactly."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul supports rank 2/3 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")

    def backward(g: Array) -> None:
        ga = g @ _swap_last2(b.data)
        gb = _swap_last2(a.data) @ g
        if ga.ndim == 3 and a.ndim == 2:
            ga = ga.sum(axis=0)
        if gb.ndim == 3 and b.ndim == 2:
            gb = gb.sum(axis=0)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with x of rank 2 or 3, w [k, m], b [m]."""
    if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"linear weight/bias shapes invalid: {w.shape}, {b.shape}")
    if x.ndim not in (2, 3) or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input {x.shape} incompatible with weight {w.shape}")

    def backward(g: Array) -> None:
        _accumulate(x, g @ w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        _accumulate(w, x2.T @ g2)
        _accumulate(b, g2.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got {x.shape}")

    def backward(g: Array) -> None:
        _accumulate(x, _swap_last2(g))

    return _make(_swap_last2(x.data), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g: Array) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# row-wise / reduction ops


def softmax_rows(x: Tensor, mask: Array | None = None, empty_rows: str = "error") -> Tensor:
    """Softmax over the last axis.

    mask: bool array broadcastable within x's shape; masked entries receive
    an additive -1e9 before the softmax and are re-zeroed exactly after, so
    each row sums to 1 over its unmasked entries and gradients never flow
    into masked positions.

    empty_rows: "error" raises DegenerateMaskError when any row has no
    unmasked entry; "zero" emits an all-zero row instead (internal use by
    attention over trials whose source mode is empty).
    """
    if x.ndim < 2:
        raise ShapeError(f"softmax_rows needs rank >= 2, got {x.shape}")
    if empty_rows not in ("error", "zero"):
        raise ValueError(f"unknown empty_rows policy {empty_rows!r}")
    if mask is None:
        mb = None
        z = x.data
    else:
        mask = np.asarray(mask, dtype=bool)
        if np.broadcast_shapes(x.shape, mask.shape) != x.shape:
            raise ShapeError(f"mask shape {mask.shape} does not broadcast within {x.shape}")
        mb = np.broadcast_to(mask, x.shape)
        if not mb.any(axis=-1).all():
            if empty_rows == "error":
                raise DegenerateMaskError("softmax row with every entry masked")
        z = x.data + np.where(mb, 0.0, -1e9)

    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    if mb is not None:
        e = np.where(mb, e, 0.0)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)

    def backward(g: Array) -> None:
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - inner))

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm scale/shift must be [{d}], got {gamma.shape}, {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g: Array) -> None:
        dxhat = g * gamma.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(
            axis=-1, keepdims=True
        )
        _accumulate(x, inv * term)
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))

    return _make(y, (x, gamma, beta), backward)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row x[..., i, :] by the scalar s[..., i, 0]."""
    if x.ndim < 2 or s.shape != x.shape[:-1] + (1,):
        raise ShapeError(f"scale_rows needs s of shape {x.shape[:-1] + (1,)}, got {s.shape}")

    def backward(g: Array) -> None:
        _accumulate(x, g * s.data)
        _accumulate(s, (g * x.data).sum(axis=-1, keepdims=True))

    return _make(x.data * s.data, (x, s), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along one axis; all other dims must agree."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = list(tensors[0].shape)
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        other = list(t.shape)
        if t.ndim != nd or other[:ax] + other[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat shapes differ off-axis: {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * nd
            idx[ax] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        _accumulate(x, np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g: Array) -> None:
        _accumulate(x, np.full_like(x.data, float(g) / n))

    return _make(np.asarray(x.data.mean()), (x,), backward)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = axis % x.ndim

    def backward(g: Array) -> None:
        gg = g if keepdims else np.expand_dims(g, ax)
        _accumulate(x, np.broadcast_to(gg, x.shape).copy())

    return _make(x.data.sum(axis=ax, keepdims=keepdims), (x,), backward)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = axis % x.ndim
    n = x.shape[ax]

    def backward(g: Array) -> None:
        gg = g if keepdims else np.expand_dims(g, ax)
        _accumulate(x, np.broadcast_to(gg / n, x.shape).copy())

    return _make(x.data.mean(axis=ax, keepdims=keepdims), (x,), backward)


def masked_mean_rows(x: Tensor, mask: Array, empty_rows: str = "error") -> Tensor:
    """Mean over the row axis (second-to-last) counting only rows whose mask
    is True: [..., n, d] with mask [..., n] -> [..., d].

    empty_rows: "error" raises DegenerateMaskError when a mask selects no
    rows; "zero" emits a zero vector for that entry instead.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.ndim < 2 or mask.shape != x.shape[:-1]:
        raise ShapeError(f"masked_mean_rows mask {mask.shape} incompatible with {x.shape}")
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        if empty_rows == "error":
            raise DegenerateMaskError("masked mean over zero valid rows")
    safe = np.where(counts == 0, 1, counts).astype(np.float64)
    w = mask / safe[..., None]  # per-row weight, 0 at masked rows
    y = (x.data * w[..., None]).sum(axis=-2)

    def backward(g: Array) -> None:
        _accumulate(x, g[..., None, :] * w[..., None])

    return _make(y, (x,), backward)


def cosine_rows(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity over the last axis: [..., d] x [..., d] -> [...].

    A zero vector on either side yields similarity exactly 0 with zero
    gradient (the defined value for empty pooled interactions)."""
    if u.shape != v.shape or u.ndim < 1:
        raise ShapeError(f"cosine_rows shapes differ: {u.shape} vs {v.shape}")
    dot = (u.data * v.data).sum(axis=-1)
    nu = np.sqrt((u.data * u.data).sum(axis=-1))
    nv = np.sqrt((v.data * v.data).sum(axis=-1))
    denom = nu * nv
    ok = denom > 1e-30
    safe = np.where(ok, denom, 1.0)
    c = np.where(ok, dot / safe, 0.0)

    def backward(g: Array) -> None:
        gm = np.where(ok, g, 0.0)[..., None]
        nu2 = np.where(ok, nu * nu, 1.0)[..., None]
        nv2 = np.where(ok, nv * nv, 1.0)[..., None]
        cd = c[..., None]
        sd = safe[..., None]
        _accumulate(u, gm * (v.data / sd - cd * u.data / nu2))
        _accumulate(v, gm * (u.data / sd - cd * v.data / nv2))

    return _make(c, (u, v), backward)


# ---------------------------------------------------------------------------
# gradient checking


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    return_per_param: bool = False,
):
    """Central-finite-difference check of reverse-mode gradients.

    loss_fn rebuilds a scalar loss from the current parameter data on every
    call. For each coordinate the relative error is
    |analytic - numeric| / max(1, |numeric|); the maximum over all
    coordinates of all params is returned (or a per-parameter dict of
    maxima when return_per_param is set).
    """
    plist = list(params)
    for p in plist:
        p.zero_grad()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError(f"check_gradients needs a scalar loss, got {loss.shape}")
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite")
    loss.backward()
    analytic = [p.grad.copy() for p in plist]

    per_param: list[float] = []
    for p, a in zip(plist, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().data)
            flat[i] = orig - h
            lm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("perturbed loss is not finite")
            numeric = (lp - lm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
        per_param.append(worst)
    for p in plist:
        p.zero_grad()
    if return_per_param:
        return dict(enumerate(per_param)) if per_param else {}
    return max(per_param, default=0.0)
