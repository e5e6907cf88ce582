"""Reverse-mode differentiation over dense float64 arrays.

A ``Var`` records its value, its parents, and a vector-Jacobian callback;
``backward`` walks the implicit tape once in reverse topological order.
Ops skip tape construction entirely when no input requires gradients, so
inference pays only the cost of the array math.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import flops
from .graph import NormalizedAdjacency, SparseGraph

__all__ = [
    "Var",
    "constant",
    "parameter",
    "backward",
    "add",
    "scale",
    "matmul",
    "transpose",
    "spmm",
    "silu",
    "layer_norm",
    "softmax_row",
    "cross_entropy",
    "bce_with_logits",
    "dropout",
    "sum_rows",
    "broadcast_rows",
    "l2_normalize_rows",
    "scale_by_global_norm",
    "mean_all",
    "sum_squares",
    "grad_check",
    "GradCheckReport",
]


class Var:
    """Node on the differentiation tape.

    ``vjp`` maps the upstream gradient to a tuple of gradients, one per
    parent, each matching that parent's value shape.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Var:
    return Var(value)


def parameter(value) -> Var:
    return Var(value, requires_grad=True)


def _node(value, parents, vjp) -> Var:
    if any(p.requires_grad for p in parents):
        return Var(value, parents, vjp, requires_grad=True)
    return Var(value)


def backward(root: Var, seed=None) -> None:
    """Accumulate gradients of ``root`` into every reachable Var.

    ``seed`` defaults to ones (a scalar root differentiates itself). Each
    node is visited exactly once, in reverse topological order; the walk is
    iterative so deep stacks do not hit the recursion limit.
    """
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    # Gradients are never mutated in place, so storing views or shared
    # arrays returned by a vjp is safe.
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(order):
        if node.grad is None or node.vjp is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def _check_same_shape(a: Var, b: Var, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def add(a: Var, b: Var) -> Var:
    _check_same_shape(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def scale(x: Var, s: Var) -> Var:
    """Multiply by a scalar (0-d or single-element) Var."""
    sv = float(s.value)
    xv = x.value

    def vjp(g):
        gs = np.array(np.sum(g * xv))
        return (sv * g, gs.reshape(s.value.shape))

    return _node(sv * xv, (x, s), vjp)


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul: inner dims {av.shape} x {bv.shape}")
    m, k = av.shape
    n = bv.shape[1]
    flops.add("matmul", 2 * m * k * n)

    def vjp(g):
        flops.add("matmul", 2 * m * k * n * 2)
        return (g @ bv.T, av.T @ g)

    return _node(av @ bv, (a, b), vjp)


def transpose(x: Var) -> Var:
    return _node(x.value.T, (x,), lambda g: (g.T,))


def spmm(adj: NormalizedAdjacency | SparseGraph, x: Var) -> Var:
    """A_norm @ X with the adjacency held constant.

    The VJP applies the same (symmetric) operator to the upstream gradient.
    """
    g = adj.graph if isinstance(adj, NormalizedAdjacency) else adj
    if x.value.shape[0] != g.num_nodes:
        raise ValueError(f"spmm: {x.value.shape[0]} rows vs {g.num_nodes} nodes")
    csr = g.csr
    d = x.value.shape[1]
    nnz = g.nnz
    flops.add("spmm", 2 * nnz * d)

    def vjp(up):
        flops.add("spmm", 2 * nnz * d)
        return (csr @ up,)

    return _node(csr @ x.value, (x,), vjp)


def silu(x: Var) -> Var:
    s = expit(x.value)
    out = x.value * s

    def vjp(g):
        return (g * (s * (1.0 + x.value * (1.0 - s))),)

    return _node(out, (x,), vjp)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Row-wise normalization over features, then featurewise affine.

    Uses the biased (1/D) variance estimator. Requires D >= 2.
    """
    xv = x.value
    d = xv.shape[1]
    if d < 2:
        raise ValueError(f"layer_norm requires >= 2 features, got {d}")
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xv - mu) * inv
    out = y * gamma.value + beta.value

    def vjp(g):
        gy = g * gamma.value
        gx = inv * (gy - gy.mean(axis=1, keepdims=True) - y * (gy * y).mean(axis=1, keepdims=True))
        return (gx, (g * y).sum(axis=0), g.sum(axis=0))

    return _node(out, (x, gamma, beta), vjp)


def softmax_row(x: Var) -> Var:
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (x,), vjp)


def cross_entropy(logits: Var, labels: np.ndarray, rows: np.ndarray | None = None) -> Var:
    """Mean negative log softmax probability of the true class.

    ``rows`` restricts the average to the given (labeled) row indices.
    """
    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.value
    if rows is None:
        rows = np.arange(lv.shape[0])
    else:
        rows = np.asarray(rows, dtype=np.int64)
    y = labels[rows] if labels.shape[0] == lv.shape[0] else labels
    if y.shape[0] != rows.shape[0]:
        raise ValueError("labels do not align with selected rows")
    if y.min() < 0 or y.max() >= lv.shape[1]:
        raise ValueError(f"label out of range [0, {lv.shape[1]})")
    sel = lv[rows]
    z = sel - sel.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(len(rows)), y].mean()

    def vjp(g):
        soft = np.exp(logp)
        soft[np.arange(len(rows)), y] -= 1.0
        out = np.zeros_like(lv)
        out[rows] = float(g) * soft / len(rows)
        return (out,)

    return _node(loss, (logits,), vjp)


def bce_with_logits(logits: Var, targets: np.ndarray, rows: np.ndarray | None = None) -> Var:
    """Mean binary cross-entropy over all selected entries, from logits.

    Stable form: max(z,0) - z*t + log1p(exp(-|z|)).
    """
    t = np.asarray(targets, dtype=np.float64)
    lv = logits.value
    if rows is None:
        rows = np.arange(lv.shape[0])
    else:
        rows = np.asarray(rows, dtype=np.int64)
    tt = t[rows] if t.shape[0] == lv.shape[0] else t
    z = lv[rows]
    if tt.shape != z.shape:
        raise ValueError(f"targets shape {tt.shape} != logits rows {z.shape}")
    loss = np.mean(np.maximum(z, 0.0) - z * tt + np.log1p(np.exp(-np.abs(z))))
    count = z.size

    def vjp(g):
        out = np.zeros_like(lv)
        out[rows] = float(g) * (expit(z) - tt) / count
        return (out,)

    return _node(loss, (logits,), vjp)


def dropout(x: Var, p: float, rng: np.random.Generator, train_mode: bool) -> Var:
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate {p} outside [0, 1)")
    if not train_mode or p == 0.0:
        return _node(x.value, (x,), lambda g: (g,))
    mask = (rng.random(x.value.shape) >= p) / (1.0 - p)

    def vjp(g):
        return (g * mask,)

    return _node(x.value * mask, (x,), vjp)


def sum_rows(x: Var) -> Var:
    """Column sums as a (1, D) row."""
    out = x.value.sum(axis=0, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return _node(out, (x,), vjp)


def broadcast_rows(row: Var, n: int) -> Var:
    """Tile a (1, D) row to (n, D)."""
    if row.value.shape[0] != 1:
        raise ValueError("broadcast_rows expects a single row")
    out = np.broadcast_to(row.value, (n, row.value.shape[1])).copy()

    def vjp(g):
        return (g.sum(axis=0, keepdims=True),)

    return _node(out, (row,), vjp)


def l2_normalize_rows(x: Var) -> Var:
    """Divide each row by its Euclidean norm. Zero rows are an error."""
    norms = np.linalg.norm(x.value, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero row")
    y = x.value / norms

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _node(y, (x,), vjp)


def scale_by_global_norm(x: Var) -> Var:
    """Divide the whole matrix by its Frobenius norm."""
    norm = np.linalg.norm(x.value)
    if norm == 0.0:
        raise ValueError("cannot normalize a zero matrix")
    y = x.value / norm

    def vjp(g):
        return ((g - y * np.sum(g * y)) / norm,)

    return _node(y, (x,), vjp)


def mean_all(x: Var) -> Var:
    out = x.value.mean()
    n = x.value.size

    def vjp(g):
        return (np.full_like(x.value, float(g) / n),)

    return _node(out, (x,), vjp)


def sum_squares(x: Var) -> Var:
    out = np.sum(x.value * x.value)

    def vjp(g):
        return (2.0 * float(g) * x.value,)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Per-coordinate comparison of reverse-mode and central differences."""

    def __init__(self, rows, max_rel_err, tolerance):
        self.rows = rows  # (name, flat_index, analytic, numeric, rel_err)
        self.max_rel_err = max_rel_err
        self.tolerance = tolerance

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def to_csv_rows(self):
        yield ("coordinate", "analytic", "numeric", "rel_err")
        for name, idx, a, n, e in self.rows:
            yield (f"{name}[{idx}]", f"{a:.17g}", f"{n:.17g}", f"{e:.3e}")


def grad_check(
    f,
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-5,
    max_coords: int = 1000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``f`` takes a dict of parameter Vars and returns a scalar Var; it must be
    deterministic. Coordinates are subsampled with a fixed seed once the
    total exceeds ``max_coords``. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    values = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    pvars = {k: parameter(v) for k, v in values.items()}
    out = f(pvars)
    if out.value.size != 1:
        raise ValueError("grad_check requires a scalar function")
    if not np.isfinite(out.value):
        raise FloatingPointError("non-finite value in forward pass")
    backward(out)
    analytic = {}
    for k, v in pvars.items():
        g = v.grad if v.grad is not None else np.zeros_like(v.value)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
        analytic[k] = g

    coords = [(k, i) for k in sorted(values) for i in range(values[k].size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(idx)]

    def eval_at(perturbed):
        local = {k: constant(v) for k, v in perturbed.items()}
        return float(f(local).value)

    rows = []
    max_err = 0.0
    for name, i in coords:
        orig = values[name].flat[i]
        values[name].flat[i] = orig + h
        fp = eval_at(values)
        values[name].flat[i] = orig - h
        fm = eval_at(values)
        values[name].flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        if not np.isfinite(numeric):
            raise FloatingPointError(f"non-finite finite-difference at {name}[{i}]")
        a = float(analytic[name].flat[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_err = max(max_err, err)
        rows.append((name, i, a, numeric, err))
    return GradCheckReport(rows, max_err, tolerance)
