"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``DiffGraph`` is an append-only tape of array-valued nodes. Each primitive
records its forward value, a vector-Jacobian closure for the reverse pass,
and a tangent builder that can re-express the primitive's directional
derivative as new tape nodes. The tangent builders are what make mixed
second derivatives cheap: to differentiate a force-matching loss with
respect to parameters, the directional derivative of the energy along the
force residual is built *on the tape* (``tangent_forward``) and a single
ordinary reverse pass over the extended tape yields
d/dparams (v . dE/dpositions).

Gradient accumulation order is fixed (descending node id, parents in
declaration order), so repeated backward passes over the same graph are
bitwise identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffGraph",
    "DiffValue",
    "GradcheckReport",
    "Gradients",
    "GroupPlan",
    "NonScalarLossError",
    "ShapeMismatchError",
    "add",
    "add_const",
    "backward",
    "concat_last",
    "cos",
    "exp",
    "frob2_last2",
    "gather",
    "gradcheck",
    "linear",
    "make_group_plan",
    "matmul3",
    "moveaxis",
    "mul",
    "neg",
    "reciprocal",
    "reshape",
    "scale",
    "scatter_sum",
    "segment_tree_sum",
    "sigmoid",
    "silu",
    "sin",
    "slice_last",
    "sqrt",
    "sub",
    "sum_reduce",
    "tangent_forward",
    "trace_last2",
    "transpose_last2",
]


class ShapeMismatchError(ValueError):
    """Incompatible operand shapes; names the op and the offending shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonScalarLossError(ValueError):
    """backward() requires a scalar (size-1) loss node."""


class DiffValue:
    """Handle to one tape node: an array value plus differentiation rules."""

    __slots__ = ("graph", "idx", "val", "no_grad", "_parents", "_vjp", "_jvp")

    def __init__(self, graph, idx, val, parents, vjp, jvp):
        self.graph = graph
        self.idx = idx
        self.val = val
        self._parents = parents
        self._vjp = vjp
        self._jvp = jvp
        # constant subgraphs never receive gradients; ops capture this at
        # build time to skip dead vector-Jacobian work
        self.no_grad = bool(parents) and all(p.no_grad for p in parents)

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def size(self):
        return self.val.size

    def __repr__(self):
        return f"DiffValue(idx={self.idx}, shape={self.shape})"

    # Arithmetic sugar; the right operand may be a python scalar.
    def __add__(self, other):
        return add_const(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return add_const(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)


class DiffGraph:
    """Append-only record of primitive operations (the tape)."""

    def __init__(self):
        self.nodes: list[DiffValue] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> DiffValue:
        """Differentiable input (parameters, positions)."""
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError("leaf: non-finite input value")
        return self._append(value, (), None, None)

    def constant(self, value) -> DiffValue:
        """Input whose gradient is never requested (labels, masks, seeds)."""
        node = self.leaf(value)
        node.no_grad = True
        return node

    def _append(self, val, parents, vjp, jvp) -> DiffValue:
        node = DiffValue(self, len(self.nodes), val, parents, vjp, jvp)
        self.nodes.append(node)
        return node

    def assert_finite(self):
        for node in self.nodes:
            if not np.all(np.isfinite(node.val)):
                raise FloatingPointError(f"node {node.idx} holds non-finite values")

    def release(self):
        """Break the node/closure reference cycles so the tape frees by
        refcount instead of waiting for a gc cycle pass. The graph is dead
        afterwards; call once gradients have been extracted."""
        for node in self.nodes:
            node._parents = ()
            node._vjp = None
            node._jvp = None
            node.val = None
        self.nodes.clear()


class Gradients:
    """Result of a backward pass; zero arrays for unreached nodes."""

    def __init__(self, buffers):
        self._buffers = buffers

    def get(self, v: DiffValue) -> np.ndarray:
        g = self._buffers[v.idx]
        if g is None:
            return np.zeros(v.shape)
        return g


def backward(out: DiffValue, wrt: Sequence[DiffValue] | None = None) -> Gradients:
    """Reverse pass from a scalar node; returns gradients for every node.

    When ``wrt`` is given, subgraphs that none of those leaves feed into are
    skipped (their gradients read as zero).
    """
    if out.size != 1:
        raise NonScalarLossError(f"backward: loss must be scalar, got shape {out.shape}")
    nodes = out.graph.nodes
    depends = None
    if wrt is not None:
        depends = np.zeros(len(nodes), dtype=bool)
        for v in wrt:
            depends[v.idx] = True
        for idx in range(len(nodes)):
            if not depends[idx]:
                node = nodes[idx]
                depends[idx] = any(depends[p.idx] for p in node._parents)
    buffers: list = [None] * len(nodes)
    buffers[out.idx] = np.ones_like(out.val)
    for idx in range(out.idx, -1, -1):
        g = buffers[idx]
        if g is None:
            continue
        node = nodes[idx]
        if node._vjp is None or node.no_grad or (depends is not None and not depends[idx]):
            continue
        for parent, contrib in node._vjp(g):
            if buffers[parent.idx] is None:
                # Own the buffer: vjp outputs that alias the upstream gradient
                # or another array (views, passthroughs) must be copied before
                # later accumulations mutate them in place.
                if contrib is g or getattr(contrib, "base", None) is not None:
                    contrib = np.array(contrib)
                buffers[parent.idx] = contrib
            else:
                buffers[parent.idx] += contrib
    return Gradients(buffers)


def tangent_forward(target: DiffValue, seeds: dict) -> DiffValue | None:
    """Build the directional-derivative subgraph of ``target``.

    ``seeds`` maps leaf DiffValues to tangent arrays. Returns the tape node
    holding the tangent of ``target`` (None if target does not depend on any
    seeded leaf). All tangent nodes are appended to the same graph, so a
    subsequent backward() differentiates through them.
    """
    graph = target.graph
    limit = target.idx
    # Restrict tangent construction to ancestors of the target.
    needed = np.zeros(limit + 1, dtype=bool)
    needed[limit] = True
    for idx in range(limit, -1, -1):
        if needed[idx]:
            for p in graph.nodes[idx]._parents:
                needed[p.idx] = True
    tangents: dict[int, DiffValue] = {}
    for leaf, arr in seeds.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != leaf.shape:
            raise ShapeMismatchError("tangent_forward", arr.shape, leaf.shape)
        tangents[leaf.idx] = graph.constant(arr)
    for idx in range(limit + 1):
        if not needed[idx]:
            continue
        node = graph.nodes[idx]
        if not node._parents or idx in tangents:
            continue
        ptans = [tangents.get(p.idx) for p in node._parents]
        if all(t is None for t in ptans):
            continue
        if node._jvp is None:
            raise NotImplementedError(f"node {idx} has no tangent rule")
        t = node._jvp(ptans)
        if t is not None:
            tangents[idx] = t
    return tangents.get(limit)


# ---------------------------------------------------------------------------
# helpers

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _same_graph(op: str, *vals: DiffValue) -> DiffGraph:
    graph = vals[0].graph
    for v in vals[1:]:
        if v.graph is not graph:
            raise ValueError(f"{op}: operands belong to different graphs")
    return graph


def _broadcast_tangent(t: DiffValue | None, shape: tuple) -> DiffValue | None:
    if t is None or t.shape == shape:
        return t
    zero = t.graph.constant(np.zeros(shape))
    return add(t, zero)


def _sum_tangents(terms: list, shape: tuple) -> DiffValue | None:
    terms = [t for t in terms if t is not None]
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return _broadcast_tangent(acc, shape)


# ---------------------------------------------------------------------------
# elementwise / linear primitives

def add(a: DiffValue, b: DiffValue) -> DiffValue:
    graph = _same_graph("add", a, b)
    try:
        val = a.val + b.val
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape)
    need_a, need_b = not a.no_grad, not b.no_grad

    def vjp(g):
        out = []
        if need_a:
            out.append((a, _unbroadcast(g, a.shape)))
        if need_b:
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    def jvp(tans):
        return _sum_tangents(list(tans), val.shape)

    return graph._append(val, (a, b), vjp, jvp)


def sub(a: DiffValue, b: DiffValue) -> DiffValue:
    graph = _same_graph("sub", a, b)
    try:
        val = a.val - b.val
    except ValueError:
        raise ShapeMismatchError("sub", a.shape, b.shape)
    need_a, need_b = not a.no_grad, not b.no_grad

    def vjp(g):
        out = []
        if need_a:
            out.append((a, _unbroadcast(g, a.shape)))
        if need_b:
            out.append((b, _unbroadcast(-g, b.shape)))
        return out

    def jvp(tans):
        ta, tb = tans
        if tb is None:
            return _broadcast_tangent(ta, val.shape)
        if ta is None:
            return _broadcast_tangent(neg(tb), val.shape)
        return _broadcast_tangent(sub(ta, tb), val.shape)

    return graph._append(val, (a, b), vjp, jvp)


def neg(a: DiffValue) -> DiffValue:
    def vjp(g):
        return [(a, -g)]

    def jvp(tans):
        return neg(tans[0])

    return a.graph._append(-a.val, (a,), vjp, jvp)


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    graph = _same_graph("mul", a, b)
    try:
        val = a.val * b.val
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape)
    need_a, need_b = not a.no_grad, not b.no_grad

    def vjp(g):
        out = []
        if need_a:
            out.append((a, _unbroadcast(g * b.val, a.shape)))
        if need_b:
            out.append((b, _unbroadcast(g * a.val, b.shape)))
        return out

    def jvp(tans):
        ta, tb = tans
        terms = []
        if ta is not None:
            terms.append(mul(ta, b))
        if tb is not None:
            terms.append(mul(a, tb))
        return _sum_tangents(terms, val.shape)

    return graph._append(val, (a, b), vjp, jvp)


def scale(a: DiffValue, c: float) -> DiffValue:
    c = float(c)

    def vjp(g):
        return [(a, g * c)]

    def jvp(tans):
        return scale(tans[0], c)

    return a.graph._append(a.val * c, (a,), vjp, jvp)


def add_const(a: DiffValue, c: float) -> DiffValue:
    c = float(c)

    def vjp(g):
        return [(a, g)]

    def jvp(tans):
        return tans[0]

    return a.graph._append(a.val + c, (a,), vjp, jvp)


def reciprocal(a: DiffValue) -> DiffValue:
    val = 1.0 / a.val

    def vjp(g):
        return [(a, -g * val * val)]

    def jvp(tans):
        # d(1/x) = -x^{-2} dx, expressed through the output node
        node_sq = mul(out, out)
        return neg(mul(tans[0], node_sq))

    out = a.graph._append(val, (a,), vjp, jvp)
    return out


def sqrt(a: DiffValue) -> DiffValue:
    val = np.sqrt(a.val)

    def vjp(g):
        return [(a, g * (0.5 / val))]

    def jvp(tans):
        return mul(tans[0], scale(reciprocal(out), 0.5))

    out = a.graph._append(val, (a,), vjp, jvp)
    return out


def exp(a: DiffValue) -> DiffValue:
    val = np.exp(a.val)

    def vjp(g):
        return [(a, g * val)]

    def jvp(tans):
        return mul(tans[0], out)

    out = a.graph._append(val, (a,), vjp, jvp)
    return out


def sin(a: DiffValue) -> DiffValue:
    def vjp(g):
        return [(a, g * np.cos(a.val))]

    def jvp(tans):
        return mul(tans[0], cos(a))

    return a.graph._append(np.sin(a.val), (a,), vjp, jvp)


def cos(a: DiffValue) -> DiffValue:
    def vjp(g):
        return [(a, -g * np.sin(a.val))]

    def jvp(tans):
        return neg(mul(tans[0], sin(a)))

    return a.graph._append(np.cos(a.val), (a,), vjp, jvp)


def sigmoid(a: DiffValue) -> DiffValue:
    val = 1.0 / (1.0 + np.exp(-a.val))

    def vjp(g):
        return [(a, g * _dsigmoid(val))]

    def jvp(tans):
        deriv = mul(out, add_const(neg(out), 1.0))
        return mul(tans[0], deriv)

    out = a.graph._append(val, (a,), vjp, jvp)
    return out


def _dsigmoid(s: np.ndarray) -> np.ndarray:
    return s * (1.0 - s)


def _dsilu(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1.0 + x * (1.0 - s))


def silu(a: DiffValue) -> DiffValue:
    s = 1.0 / (1.0 + np.exp(-a.val))
    val = a.val * s

    def vjp(g):
        return [(a, g * _dsilu(a.val, s))]

    def jvp(tans):
        sg = sigmoid(a)
        deriv = add(sg, mul(a, mul(sg, add_const(neg(sg), 1.0))))
        return mul(tans[0], deriv)

    return a.graph._append(val, (a,), vjp, jvp)


# ---------------------------------------------------------------------------
# structural primitives

def matmul3(a: DiffValue, b: DiffValue) -> DiffValue:
    """Batched 3x3 matrix product; leading dimensions must match exactly."""
    _same_graph("matmul3", a, b)
    if a.shape != b.shape or a.shape[-2:] != (3, 3):
        raise ShapeMismatchError("matmul3", a.shape, b.shape)
    val = a.val @ b.val
    need_a, need_b = not a.no_grad, not b.no_grad

    def vjp(g):
        out = []
        if need_a:
            out.append((a, g @ np.swapaxes(b.val, -1, -2)))
        if need_b:
            out.append((b, np.swapaxes(a.val, -1, -2) @ g))
        return out

    def jvp(tans):
        ta, tb = tans
        terms = []
        if ta is not None:
            terms.append(matmul3(ta, b))
        if tb is not None:
            terms.append(matmul3(a, tb))
        return _sum_tangents(terms, val.shape)

    return a.graph._append(val, (a, b), vjp, jvp)


def transpose_last2(a: DiffValue) -> DiffValue:
    def vjp(g):
        return [(a, np.swapaxes(g, -1, -2))]

    def jvp(tans):
        return transpose_last2(tans[0])

    return a.graph._append(np.swapaxes(a.val, -1, -2), (a,), vjp, jvp)


def moveaxis(a: DiffValue, src: int, dst: int) -> DiffValue:
    def vjp(g):
        return [(a, np.moveaxis(g, dst, src))]

    def jvp(tans):
        return moveaxis(tans[0], src, dst)

    return a.graph._append(np.moveaxis(a.val, src, dst), (a,), vjp, jvp)


def reshape(a: DiffValue, shape: tuple) -> DiffValue:
    shape = tuple(shape)
    old = a.shape

    def vjp(g):
        return [(a, g.reshape(old))]

    def jvp(tans):
        return reshape(tans[0], shape)

    return a.graph._append(a.val.reshape(shape), (a,), vjp, jvp)


def trace_last2(a: DiffValue) -> DiffValue:
    """Trace over the trailing matrix axes, keepdims: (..., k, k) -> (..., 1, 1)."""
    k = a.shape[-1]
    eye = np.eye(k)
    val = np.trace(a.val, axis1=-2, axis2=-1)[..., None, None]

    def vjp(g):
        return [(a, g * eye)]

    def jvp(tans):
        return trace_last2(tans[0])

    return a.graph._append(val, (a,), vjp, jvp)


def frob2_last2(a: DiffValue, keepdims: bool = False) -> DiffValue:
    """Sum of squared entries over the trailing matrix axes."""
    val = np.einsum("...ij,...ij->...", a.val, a.val)
    if keepdims:
        val = val[..., None, None]

    def vjp(g):
        gg = g if keepdims else g[..., None, None]
        return [(a, gg * (2.0 * a.val))]

    def jvp(tans):
        t = tans[0]
        s = sum_reduce(mul(t, a), axis=(-2, -1), keepdims=keepdims)
        return scale(s, 2.0)

    return a.graph._append(val, (a,), vjp, jvp)


def sum_reduce(a: DiffValue, axis=None, keepdims: bool = False) -> DiffValue:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    val = np.sum(a.val, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, a.shape).copy())]

    def jvp(tans):
        return sum_reduce(tans[0], axis=axis, keepdims=keepdims)

    return a.graph._append(np.asarray(val), (a,), vjp, jvp)


def slice_last(a: DiffValue, start: int, stop: int) -> DiffValue:
    def vjp(g):
        out = np.zeros(a.shape)
        out[..., start:stop] = g
        return [(a, out)]

    def jvp(tans):
        return slice_last(tans[0], start, stop)

    return a.graph._append(a.val[..., start:stop], (a,), vjp, jvp)


def concat_last(parts: Sequence[DiffValue]) -> DiffValue:
    parts = list(parts)
    graph = _same_graph("concat_last", *parts)
    val = np.concatenate([p.val for p in parts], axis=-1)
    sizes = [p.shape[-1] for p in parts]

    def vjp(g):
        out = []
        off = 0
        for p, s in zip(parts, sizes):
            if not p.no_grad:
                out.append((p, g[..., off:off + s]))
            off += s
        return out

    def jvp(tans):
        filled = []
        for p, t in zip(parts, tans):
            filled.append(t if t is not None else graph.constant(np.zeros(p.shape)))
        return concat_last(filled)

    return graph._append(val, tuple(parts), vjp, jvp)


# ---------------------------------------------------------------------------
# gather / scatter over index arrays

@dataclass(frozen=True)
class GroupPlan:
    """Precomputed grouping of an index array for deterministic scatter-adds.

    ``perm`` orders entries by (id, order_rank); within each id group the
    accumulation order follows ``order_rank``, which callers choose to be
    permutation-covariant (e.g. a geometric edge rank). ``starts`` are the
    group boundaries in the permuted array and ``uniq`` the group ids.
    """

    ids: np.ndarray
    size: int
    perm: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)
    uniq: np.ndarray = field(repr=False)


def make_group_plan(ids, size: int, order_rank=None) -> GroupPlan:
    ids = np.asarray(ids, dtype=np.intp)
    if order_rank is None:
        order_rank = np.arange(ids.shape[0], dtype=np.intp)
    perm = np.lexsort((np.asarray(order_rank), ids))
    sorted_ids = ids[perm]
    if sorted_ids.size:
        starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
        uniq = sorted_ids[starts]
    else:
        starts = np.zeros(0, dtype=np.intp)
        uniq = np.zeros(0, dtype=np.intp)
    return GroupPlan(ids=ids, size=int(size), perm=perm, starts=starts, uniq=uniq)


def _grouped_sum(values: np.ndarray, plan: GroupPlan) -> np.ndarray:
    out = np.zeros((plan.size,) + values.shape[1:])
    if plan.ids.size:
        ordered = values[plan.perm]
        sums = np.add.reduceat(ordered, plan.starts, axis=0)
        out[plan.uniq] = sums
    return out


def gather(a: DiffValue, plan: GroupPlan) -> DiffValue:
    """Row lookup a[ids]; the plan fixes the backward accumulation order."""
    if plan.size != a.shape[0]:
        raise ShapeMismatchError("gather", (plan.size,), a.shape)
    val = a.val[plan.ids]

    def vjp(g):
        return [(a, _grouped_sum(g, plan))]

    def jvp(tans):
        return gather(tans[0], plan)

    return a.graph._append(val, (a,), vjp, jvp)


def scatter_sum(a: DiffValue, plan: GroupPlan) -> DiffValue:
    """Segment sum of rows into ``plan.size`` slots (edge -> node reduction)."""
    if plan.ids.shape[0] != a.shape[0]:
        raise ShapeMismatchError("scatter_sum", plan.ids.shape, a.shape)
    val = _grouped_sum(a.val, plan)

    def vjp(g):
        return [(a, g[plan.ids])]

    def jvp(tans):
        return scatter_sum(tans[0], plan)

    return a.graph._append(val, (a,), vjp, jvp)


def _tree_fold(x: np.ndarray) -> np.ndarray:
    """Pairwise halving sum along axis 0. Exact doubling: folding [C, C]
    splits at the copy boundary, so the total is bitwise 2x the half."""
    while x.shape[0] > 1:
        n = x.shape[0]
        m = (n + 1) // 2
        head = x[:m].copy()
        head[: n - m] += x[m:]
        x = head
    return x[0]


def segment_tree_sum(a: DiffValue, starts: Sequence[int]) -> DiffValue:
    """Per-segment pairwise-tree sum over axis 0 (atoms -> systems)."""
    bounds = list(starts) + [a.shape[0]]
    vals = [
        _tree_fold(a.val[bounds[k]:bounds[k + 1]]) if bounds[k + 1] > bounds[k]
        else np.zeros(a.shape[1:])
        for k in range(len(starts))
    ]
    val = np.stack(vals, axis=0) if vals else np.zeros((0,) + a.shape[1:])

    def vjp(g):
        out = np.empty(a.shape)
        for k in range(len(starts)):
            out[bounds[k]:bounds[k + 1]] = g[k]
        return [(a, out)]

    def jvp(tans):
        return segment_tree_sum(tans[0], starts)

    return a.graph._append(val, (a,), vjp, jvp)


def linear(x: DiffValue, w: DiffValue, b: DiffValue) -> DiffValue:
    """Affine map over the last axis: x @ w + b."""
    graph = _same_graph("linear", x, w, b)
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0] or w.ndim != 2 or b.ndim != 1:
        raise ShapeMismatchError("linear", x.shape, w.shape, b.shape)
    val = x.val @ w.val + b.val
    need_x, need_w, need_b = not x.no_grad, not w.no_grad, not b.no_grad

    def vjp(g):
        out = []
        if need_x:
            out.append((x, g @ w.val.T))
        if need_w or need_b:
            g2 = g.reshape(-1, w.shape[1])
            if need_w:
                out.append((w, x.val.reshape(-1, w.shape[0]).T @ g2))
            if need_b:
                out.append((b, g2.sum(axis=0)))
        return out

    def jvp(tans):
        tx, tw, tb = tans
        terms = []
        zero_b = None
        if tx is not None or tw is not None:
            zero_b = graph.constant(np.zeros(b.shape))
        if tx is not None:
            terms.append(linear(tx, w, zero_b))
        if tw is not None:
            terms.append(linear(x, tw, zero_b))
        if tb is not None:
            terms.append(tb)
        return _sum_tangents(terms, val.shape)

    return graph._append(val, (x, w, b), vjp, jvp)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradcheckEntry:
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def abs_dev(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric)


@dataclass
class GradcheckReport:
    """Per-coordinate analytic vs central-difference comparison."""

    entries: list[GradcheckEntry]
    h: float

    @property
    def max_abs_dev(self) -> float:
        return max(float(e.abs_dev.max(initial=0.0)) for e in self.entries)

    @property
    def max_rel_dev(self) -> float:
        worst = 0.0
        for e in self.entries:
            scale_ = max(float(np.abs(e.numeric).max(initial=0.0)), 1e-12)
            worst = max(worst, float(e.abs_dev.max(initial=0.0)) / scale_)
        return worst

    def passed(self, atol: float = 1e-6, rtol: float = 1e-5) -> bool:
        return self.max_abs_dev <= atol or self.max_rel_dev <= rtol


def gradcheck(fn: Callable, args: Sequence[np.ndarray], h: float = 1e-5) -> GradcheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` receives one leaf DiffValue per entry of ``args`` (all on a fresh
    graph) and must return a scalar DiffValue.
    """
    args = [np.asarray(a, dtype=np.float64) for a in args]

    def build(arrs):
        graph = DiffGraph()
        leaves = [graph.leaf(a) for a in arrs]
        out = fn(*leaves)
        return out, leaves

    out, leaves = build(args)
    grads = backward(out)
    analytic = [grads.get(leaf) for leaf in leaves]

    entries = []
    for k, arr in enumerate(args):
        numeric = np.zeros_like(arr)
        flat = numeric.reshape(-1)
        base = arr.reshape(-1)
        for i in range(base.size):
            for sign_, slot in ((+1.0, 0), (-1.0, 1)):
                pert = [a.copy() for a in args]
                pf = pert[k].reshape(-1)
                pf[i] = base[i] + sign_ * h
                value = float(build(pert)[0].val)
                if slot == 0:
                    plus = value
                else:
                    flat[i] = (plus - value) / (2.0 * h)
        entries.append(GradcheckEntry(analytic=analytic[k], numeric=numeric))
    return GradcheckReport(entries=entries, h=h)
