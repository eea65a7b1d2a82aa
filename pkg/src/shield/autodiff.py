"""Reverse-mode automatic differentiation over dense float64 arrays.

Scalars, vectors and matrices share one node type.  The graph is recorded
implicitly through parent links during the forward pass and replayed in
reverse topological order by ``Tensor.backward()``; each op installs a
closure holding its local gradient rule.  All arithmetic is double
precision; persistence formats downcast to float32 at their own boundary.

Accumulation orders are fixed (row-major numpy kernels, and exactly-rounded
column sums in :func:`mean_pool`), so identical inputs reproduce identical
bits run to run.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, UsageError


def _as_array(data) -> np.ndarray:
    # order="C" keeps 0-d scalars 0-d, unlike ascontiguousarray
    arr = np.asarray(data, dtype=np.float64, order="C")
    if arr.ndim > 2:
        raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """One node of the computation graph: a float64 scalar, vector or matrix."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into the .grad of every reachable leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """Trainable tensor; .grad persists and accumulates until explicitly zeroed."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.data + b.data, (a, b), backward)


def scale(t, c: float) -> Tensor:
    t = _tensor(t)
    c = float(c)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * c)

    return _node(t.data * c, (t,), backward)


def hadamard(a, b) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix/vector product; supports matrix@matrix, matrix@vector,
    vector@matrix and the vector-vector dot product."""
    a, b = _tensor(a), _tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: operands must be vectors or matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        elif a.ndim == 2 and b.ndim == 1:
            if a.requires_grad:
                a._accumulate(np.outer(g, b.data))
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            if a.requires_grad:
                a._accumulate(b.data @ g)
            if b.requires_grad:
                b._accumulate(np.outer(a.data, g))
        else:  # dot product, g has shape ()
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

    return _node(out, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """weight @ x + bias for a vector x."""
    x, weight, bias = _tensor(x), _tensor(weight), _tensor(bias)
    if x.ndim != 1 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(
            f"linear: expected vector/matrix/vector, got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if weight.shape[1] != x.shape[0] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(
            f"linear: incompatible shapes W={weight.shape}, x={x.shape}, b={bias.shape}"
        )
    return add(matmul(weight, x), bias)


def transpose(t) -> Tensor:
    t = _tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {t.shape}")

    def backward(g):
        if t.requires_grad:
            t._accumulate(np.asarray(g.T, order="C"))

    return _node(np.asarray(t.data.T, order="C"), (t,), backward)


def mean_pool(h) -> Tensor:
    """Column means of a matrix.

    Each column is reduced with an exactly-rounded sum, so the result is
    invariant under any reordering of the rows, bit for bit.
    """
    h = _tensor(h)
    if h.ndim != 2:
        raise ShapeError(f"mean_pool expects a matrix, got shape {h.shape}")
    rows = h.shape[0]
    if rows == 0:
        raise ShapeError("mean_pool: empty input")
    out = np.array([math.fsum(h.data[:, j]) for j in range(h.shape[1])]) / rows

    def backward(g):
        if h.requires_grad:
            h._accumulate(np.tile(g / rows, (rows, 1)))

    return _node(out, (h,), backward)


def relu(t) -> Tensor:
    t = _tensor(t)
    mask = t.data > 0

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * mask)

    return _node(np.where(mask, t.data, 0.0), (t,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(t) -> Tensor:
    t = _tensor(t)
    s = _sigmoid_stable(np.atleast_1d(t.data.copy())).reshape(t.shape)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * s * (1.0 - s))

    return _node(s, (t,), backward)


def concat(parts) -> Tensor:
    """Concatenate vectors into one vector, in the given order."""
    parts = [_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no inputs")
    for p in parts:
        if p.ndim != 1:
            raise ShapeError(f"concat expects vectors, got shape {p.shape}")
    out = np.concatenate([p.data for p in parts])
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _node(out, tuple(parts), backward)


def vconcat(parts) -> Tensor:
    """Stack matrices with equal column counts on top of each other."""
    parts = [_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("vconcat: no inputs")
    cols = {p.shape[1] for p in parts if p.ndim == 2}
    if any(p.ndim != 2 for p in parts) or len(cols) != 1:
        raise ShapeError(f"vconcat expects matrices with equal widths, got {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _node(out, tuple(parts), backward)


def tsum(t) -> Tensor:
    """Sum of all entries, as a scalar node."""
    t = _tensor(t)

    def backward(g):
        if t.requires_grad:
            t._accumulate(np.full_like(t.data, float(g)))

    return _node(np.asarray(np.sum(t.data)), (t,), backward)


def bce_loss(logit, label) -> Tensor:
    """Binary cross-entropy from a raw logit, in log-sum-exp form.

    Finite for any finite logit: never exponentiates a positive value.
    """
    logit = _tensor(logit)
    if logit.data.size != 1:
        raise ShapeError(f"bce_loss expects a scalar logit, got shape {logit.shape}")
    if label not in (0, 1):
        raise DomainError(f"bce_loss: label must be 0 or 1, got {label!r}")
    x = float(logit.data.reshape(()))
    if not math.isfinite(x):
        raise DomainError("bce_loss: logit must be finite")
    y = float(label)
    loss = math.log1p(math.exp(-abs(x))) + max(x, 0.0) - x * y

    def backward(g):
        if logit.requires_grad:
            s = 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))
            logit._accumulate(np.full_like(logit.data, (s - y) * float(g)))

    return _node(np.asarray(loss), (logit,), backward)


# ---------------------------------------------------------------------------
# optimization


class AdamState:
    """Adam moment buffers and step counter for a fixed parameter list."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0


def adam_step(params: Sequence[Param], state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes every gradient afterwards."""
    params = list(params)
    if len(params) != len(state.params) or any(p is not q for p, q in zip(params, state.params)):
        raise UsageError("adam_step: params do not match the ones the state was built for")
    state.step_count += 1
    c1 = 1.0 - state.beta1 ** state.step_count
    c2 = 1.0 - state.beta2 ** state.step_count
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad[...] = 0.0


def zero_grads(params: Sequence[Param]) -> None:
    for p in params:
        p.grad[...] = 0.0


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Param], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    loss_fn must rebuild its graph on every call (it is re-evaluated with
    perturbed parameter entries).  Returns the worst relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|) over all entries.
    """
    if eps <= 0:
        raise DomainError(f"grad_check: eps must be positive, got {eps}")
    params = list(params)
    zero_grads(params)
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    zero_grads(params)
    worst = 0.0
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        flat_grads = grads.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = loss_fn().item()
            flat[idx] = orig - eps
            f_minus = loss_fn().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = flat_grads[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
