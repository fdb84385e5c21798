"""Minimal reverse-mode differentiation over dense float64 arrays.

Only the primitives the classifier heads need are provided. Column vectors
carry one sample each; a batch of B samples is an (n, B) matrix, so every op
below works for a single (n, 1) sample and for a batch alike.

Backward accumulates into ``Node.grad``; call ``zero_grad`` between steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import LengthMismatch, NonScalarRoot, ShapeMismatch
from .hierarchy import NEG, POS, UNK, Hierarchy

BCE_EPS = 1e-7
FD_STEP = 1e-5


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "info")

    def __init__(self, value, parents: tuple = (), backward_fn=None, requires_grad=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.op = op
        self.info: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def backward(self) -> None:
        if self.value.size != 1:
            raise NonScalarRoot(f"backward needs a scalar root, got shape {self.shape}")
        order = topo_order(self)
        upstream = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            node.grad += g
            if node.backward_fn is None:
                continue
            pgrads = node.backward_fn(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in upstream:
                    upstream[key] = upstream[key] + pg
                else:
                    upstream[key] = pg


def param(value) -> Node:
    return Node(value, requires_grad=True)


def const(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


# ---------------------------------------------------------------------------
# primitives


def affine(x: Node, weight: Node, bias: Node) -> Node:
    """weight @ x + bias, with bias broadcast over the batch columns."""
    x, weight, bias = _as_node(x), _as_node(weight), _as_node(bias)
    if x.value.ndim != 2 or weight.value.ndim != 2:
        raise ShapeMismatch("affine expects 2-d x and weight")
    m, n = weight.shape
    if x.shape[0] != n or bias.shape != (m, 1):
        raise ShapeMismatch(f"affine: weight {weight.shape}, x {x.shape}, bias {bias.shape}")
    xv, wv = x.value, weight.value

    def backward(g):
        return wv.T @ g, g @ xv.T, g.sum(axis=1, keepdims=True)

    return Node(wv @ xv + bias.value, (x, weight, bias), backward, op="affine")


def sigmoid(x: Node) -> Node:
    x = _as_node(x)
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Node(out, (x,), backward, op="sigmoid")


def tanh(x: Node) -> Node:
    x = _as_node(x)
    out = np.tanh(x.value)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Node(out, (x,), backward, op="tanh")


def softmax_cols(x: Node) -> Node:
    """Softmax along axis 0, i.e. each column (per trailing index) sums to one."""
    x = _as_node(x)
    if x.value.ndim < 2 or x.shape[0] < 1:
        raise ShapeMismatch("softmax_cols expects at least one row")
    z = x.value - x.value.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=0, keepdims=True)),)

    return Node(out, (x,), backward, op="softmax_cols")


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    x = _as_node(x)
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return Node(x.value.reshape(shape), (x,), backward, op="reshape")


def mul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g * bv, g * av

    return Node(av * bv, (a, b), backward, op="mul")


def take_rows(x: Node, index: np.ndarray) -> Node:
    """Gather rows; repeated indices accumulate on the way back."""
    x = _as_node(x)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, index, g)
        return (gx,)

    return Node(x.value[index], (x,), backward, op="take_rows")


def _check_fine(p: Node, h: Hierarchy) -> None:
    if p.value.ndim != 2 or p.shape[0] != h.n_fine:
        raise LengthMismatch(f"expected {h.n_fine} fine rows, got shape {p.shape}")


def grouped_max(p: Node, h: Hierarchy) -> Node:
    """Per-group max. Gradient goes to the argmax child only, lowest index on ties."""
    p = _as_node(p)
    _check_fine(p, h)
    pv = p.value
    cols = np.arange(pv.shape[1])
    out = np.empty((h.n_coarse, pv.shape[1]))
    winners = np.empty((h.n_coarse, pv.shape[1]), dtype=np.intp)
    min_gap = np.inf
    for c, idx in enumerate(h.group_index):
        sub = pv[idx]
        am = sub.argmax(axis=0)
        winners[c] = idx[am]
        out[c] = sub[am, cols]
        if len(idx) > 1:
            top2 = np.sort(sub, axis=0)[-2:]
            min_gap = min(min_gap, float((top2[1] - top2[0]).min()))

    def backward(g):
        gp = np.zeros_like(pv)
        # groups partition the rows, so winners never collide across c
        for c in range(winners.shape[0]):
            gp[winners[c], cols] = g[c]
        return (gp,)

    node = Node(out, (p,), backward, op="grouped_max")
    node.info["min_gap"] = min_gap
    return node


def grouped_avg(p: Node, h: Hierarchy) -> Node:
    p = _as_node(p)
    _check_fine(p, h)
    pv = p.value
    out = np.stack([pv[idx].mean(axis=0) for idx in h.group_index])

    def backward(g):
        gp = np.empty_like(pv)
        for c, idx in enumerate(h.group_index):
            gp[idx] = g[c] / len(idx)
        return (gp,)

    return Node(out, (p,), backward, op="grouped_avg")


def matvec_T(W: Node, p: Node) -> Node:
    """W^T p.

    W is either a shared (F, C) matrix or a per-sample (F, C, B) stack whose
    last axis lines up with the batch columns of p (F, B).
    """
    W, p = _as_node(W), _as_node(p)
    wv, pv = W.value, p.value
    if pv.ndim != 2 or wv.shape[0] != pv.shape[0]:
        raise ShapeMismatch(f"matvec_T: W {wv.shape}, p {pv.shape}")
    if wv.ndim == 2:
        def backward(g):
            return pv @ g.T, wv @ g

        return Node(wv.T @ pv, (W, p), backward, op="matvec_T")
    if wv.ndim != 3 or wv.shape[2] != pv.shape[1]:
        raise ShapeMismatch(f"matvec_T: W {wv.shape}, p {pv.shape}")

    def backward_batched(g):
        return pv[:, None, :] * g[None, :, :], np.einsum("fcb,cb->fb", wv, g)

    return Node(np.einsum("fcb,fb->cb", wv, pv), (W, p), backward_batched, op="matvec_T")


def bce_with_mask(p: Node, labels, mask) -> Node:
    """Mean BCE over entries where ``mask`` is true; 0 if nothing is observed.

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS]; the clamp passes no
    gradient where it is active.
    """
    p = _as_node(p)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != p.shape or mask.shape != p.shape:
        raise LengthMismatch(f"bce: p {p.shape}, labels {labels.shape}, mask {mask.shape}")
    count = int(mask.sum())
    pv = p.value
    if count == 0:
        def backward_empty(g):
            return (np.zeros_like(pv),)

        return Node(np.zeros((1, 1)), (p,), backward_empty, op="masked_bce")
    y = np.where(mask, labels, 0).astype(np.float64)
    ph = np.clip(pv, BCE_EPS, 1.0 - BCE_EPS)
    terms = np.where(mask, -(y * np.log(ph) + (1.0 - y) * np.log1p(-ph)), 0.0)
    loss = terms.sum() / count
    inside = (pv >= BCE_EPS) & (pv <= 1.0 - BCE_EPS)

    def backward(g):
        d = (ph - y) / (ph * (1.0 - ph)) / count
        return (np.where(mask & inside, d, 0.0) * g.reshape(()),)

    return Node(np.full((1, 1), loss), (p,), backward, op="masked_bce")


def masked_bce(p: Node, states) -> Node:
    """BCE against a LabelState matrix; Unobserved entries are skipped."""
    states = np.asarray(states)
    bad = ~np.isin(states, (POS, NEG, UNK))
    if bad.any():
        raise ValueError("states must hold LabelState values")
    return bce_with_mask(p, states == POS, states != UNK)


def weighted_sum(nodes: Iterable[Node], weights: Iterable[float]) -> Node:
    nodes, weights = list(nodes), [float(w) for w in weights]
    shape = nodes[0].shape
    if any(n.shape != shape for n in nodes):
        raise ShapeMismatch("weighted_sum needs equal shapes")
    out = sum(w * n.value for w, n in zip(weights, nodes))

    def backward(g):
        return tuple(w * g for w in weights)

    return Node(out, tuple(nodes), backward, op="weighted_sum")


def unit_guard(x: Node) -> Node:
    """Clip to [0, 1] against rounding drift (e.g. a convex combination landing
    one ulp above 1). The shift is a few ulps at most, so the gradient is passed
    through unchanged."""
    x = _as_node(x)
    return Node(np.clip(x.value, 0.0, 1.0), (x,), lambda g: (g,), op="unit_guard")


def sum_all(x: Node) -> Node:
    x = _as_node(x)

    def backward(g):
        return (np.full_like(x.value, g.reshape(())),)

    return Node(np.full((1, 1), x.value.sum()), (x,), backward, op="sum")


# ---------------------------------------------------------------------------
# finite-difference checking


NEAR_TIE = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict[str, float] = field(default_factory=dict)
    trials: int = 0
    skipped: int = 0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true derivative is ~0 from being judged on
    finite-difference roundoff alone.
    """
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``arr``, perturbed in place."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def _nondifferentiable(root: Node) -> bool:
    return any(n.info.get("min_gap", np.inf) < NEAR_TIE for n in topo_order(root))


def check_gradients(
    build: Callable[[np.random.Generator], tuple[dict[str, np.ndarray], Callable[[Mapping[str, Node]], Node]]],
    trials: int = 1,
    seed: int = 0,
    h: float = FD_STEP,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``build(rng)`` returns ``(inputs, fn)`` where ``inputs`` maps names to
    arrays and ``fn`` turns a dict of input nodes into a scalar root. Trials
    whose graph passes through a grouped max at (or within NEAR_TIE of) a tie
    are skipped, since the max is not differentiable there.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0)
    for _ in range(trials):
        inputs, fn = build(rng)
        nodes = {k: param(v) for k, v in inputs.items()}
        root = fn(nodes)
        if root.value.size != 1:
            raise NonScalarRoot(f"root has shape {root.shape}")
        if _nondifferentiable(root):
            report.skipped += 1
            continue
        root.backward()
        for name, node in nodes.items():
            arr = node.value

            def evaluate():
                return fn({k: const(n.value) for k, n in nodes.items()}).item()

            num = numeric_grad(evaluate, arr, h)
            err = relative_error(node.grad, num)
            report.per_input[name] = max(report.per_input.get(name, 0.0), err)
            report.max_rel_error = max(report.max_rel_error, err)
        report.trials += 1
    return report
