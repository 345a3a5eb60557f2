"""Four-way products ``A1 · J1 · J2ᵀ · A2ᵀ`` over a shared parameter block.

``A1`` and ``A2`` are output cotangents of two nodes reading the same θ,
``J1`` and ``J2`` their structured Jacobians. Each operand gets einsum labels
from the structure tags: a θ axis that is constant-block-diagonal on both
sides becomes a label shared by the two cotangents, a block-diagonal one is
shared by all four operands, an input-tiled one disappears into a scalar
factor, and output-tiled y axes are summed out of the cotangent up front.
The remaining labels are contracted pairwise in one of three orders.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .structure import (
    Layout,
    StructureError,
    StructureKind,
    StructureTag,
    StructuredJacobian,
)

__all__ = [
    "Order",
    "JacobianShape",
    "CostEstimate",
    "intersect_structures",
    "mjjmp_cost",
    "mjjmp_execute",
    "best_order",
    "execution_flops",
]

S = StructureKind


class Order(enum.Enum):
    OUTSIDE_IN = "OutsideIn"
    LEFT_TO_RIGHT = "LeftToRight"
    INSIDE_OUT = "InsideOut"


# tie-break precedence, most preferred first
PRECEDENCE = (Order.INSIDE_OUT, Order.LEFT_TO_RIGHT, Order.OUTSIDE_IN)

_STEPS = {
    Order.OUTSIDE_IN: (("A1", "S1", "L"), ("S2", "A2", "R"), ("L", "R", "out")),
    Order.LEFT_TO_RIGHT: (("A1", "S1", "L"), ("L", "S2", "M"), ("M", "A2", "out")),
    Order.INSIDE_OUT: (("S1", "S2", "M"), ("A1", "M", "L"), ("L", "A2", "out")),
}

_BATCH = {"n": 0, "m": 1, "a": 2, "b": 3}


@dataclass(frozen=True)
class JacobianShape:
    """Shape-only stand-in for a :class:`StructuredJacobian`."""

    tags: tuple[StructureTag, ...]
    y_shape: tuple[int, ...]
    param_shape: tuple[int, ...]
    sub_lead: int = 1


def _shape_of(j) -> JacobianShape:
    if isinstance(j, JacobianShape):
        return j
    return JacobianShape(tuple(j.tags), tuple(j.y_shape), tuple(j.param_shape), j.subarray.shape[0])


@dataclass(frozen=True)
class Term:
    """One contraction step: ``base * n1^e0 * n2^e1 * o1^e2 * o2^e3``."""

    exponents: tuple[int, int, int, int]
    base: int
    flops: int

    def dominated_by(self, other: Term) -> bool:
        return all(a <= b for a, b in zip(self.exponents, other.exponents)) and self.base <= other.base


@dataclass
class CostEstimate:
    order: Order
    flops: int
    terms: list[Term] = field(default_factory=list)
    measured_steps: int = 0
    peak_elements: int = 0


def intersect_structures(tags_b, tags_c) -> list[StructureTag]:
    """θ-coupled structure usable by both sides, one tag per common θ axis.

    Output-tiled axes involve no θ axis and stay with their own side, so
    they never appear here; an empty result means the dense path.
    """
    def keyed(tags):
        out = {}
        for tag in tags:
            if tag.kind in (S.CONSTANT_BLOCK_DIAGONAL, S.BLOCK_DIAGONAL, S.INPUT_BLOCK_TILED):
                for b, c in zip(tag.param_axes, tag.counts):
                    out[b] = (tag.kind, c)
            elif tag.kind is S.BLOCK_TILED:
                counts = tag.counts[len(tag.output_axes):] or tag.counts
                for b, c in zip(tag.param_axes, counts):
                    out[b] = (S.INPUT_BLOCK_TILED, c)
        return out

    kb, kc = keyed(tags_b), keyed(tags_c)
    return [StructureTag(kb[b][0], (), (b,), (kb[b][1],)) for b in sorted(kb) if kc.get(b, (None,))[0] is kb[b][0]]


def _reduce_layout(layout: Layout, keep: dict[int, StructureKind]) -> Layout:
    pairs = tuple(p for p in layout.pairs if keep.get(p[1]) is p[2])
    ibt = tuple(b for b in layout.ibt if keep.get(b) is S.INPUT_BLOCK_TILED)
    return Layout(layout.y_shape, layout.p_shape, pairs, layout.obt, ibt)


def _expand(sub: np.ndarray, old: Layout, new: Layout) -> np.ndarray:
    """Materialize the tags dropped between ``old`` and ``new`` into the subarray."""
    if old == new:
        return sub
    letters = iter("cdefghijklopqrstuvwxyz")
    y_lab = [next(letters) for _ in old.y_shape]
    p_lab = [next(letters) for _ in old.p_shape]
    terms = ["N" + "".join(y_lab[a] for a in old.y_kept) + "".join(p_lab[b] for b in old.p_kept)]
    operands = [sub]
    for a, b, kind in old.pairs:
        if (a, b, kind) not in new.pairs:
            terms.append(y_lab[a] + p_lab[b])
            operands.append(np.eye(old.y_shape[a]))
    for b in old.ibt:
        if b not in new.ibt:
            terms.append(p_lab[b])
            operands.append(np.ones(old.p_shape[b]))
    out = "N" + "".join(y_lab[a] for a in new.y_kept) + "".join(p_lab[b] for b in new.p_kept)
    result = np.einsum(",".join(terms) + "->" + out, *operands)
    T.add_flops(result.size, "expand")
    return T.track(np.ascontiguousarray(result))


@dataclass
class _Plan:
    labels: dict[str, str]
    sizes: dict[str, dict[str, int]]
    presum: dict[str, tuple[int, ...]]
    factor: int
    layouts: tuple[Layout, Layout]


def _plan(o1: int, n1: int, j1: JacobianShape, o2: int, n2: int, j2: JacobianShape) -> _Plan:
    if tuple(j1.param_shape) != tuple(j2.param_shape):
        raise StructureError(f"Jacobians refer to different parameter shapes {j1.param_shape} and {j2.param_shape}")
    lay1 = Layout.from_tags(j1.tags, j1.y_shape, j1.param_shape)
    lay2 = Layout.from_tags(j2.tags, j2.y_shape, j2.param_shape)
    common = {t.param_axes[0]: t.kind for t in intersect_structures(j1.tags, j2.tags)}
    lay1, lay2 = _reduce_layout(lay1, common), _reduce_layout(lay2, common)
    p_shape = tuple(j1.param_shape)

    pool = iter("cdefghijklopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")
    theta = [next(pool) for _ in p_shape]
    labels: dict[str, str] = {}
    sizes: dict[str, dict[str, int]] = {}
    presum: dict[str, tuple[int, ...]] = {}
    for side, (o, n, lay, lead, ol, nl) in {
        "1": (o1, n1, lay1, j1.sub_lead, "a", "n"),
        "2": (o2, n2, lay2, j2.sub_lead, "b", "m"),
    }.items():
        paired = {a: b for a, b, _ in lay.pairs}
        y_lab = [theta[paired[a]] if a in paired else next(pool) for a in range(len(lay.y_shape))]
        a_lab = ol + nl + "".join(y_lab[a] for a in range(len(lay.y_shape)) if a not in lay.obt)
        s_lab = nl + "".join(y_lab[a] for a in lay.y_kept) + "".join(theta[b] for b in lay.p_kept)
        labels["A" + side], labels["S" + side] = a_lab, s_lab
        a_sizes = {ol: o, nl: n}
        a_sizes.update({y_lab[a]: lay.y_shape[a] for a in range(len(lay.y_shape)) if a not in lay.obt})
        s_sizes = {nl: lead}
        s_sizes.update({y_lab[a]: lay.y_shape[a] for a in lay.y_kept})
        s_sizes.update({theta[b]: p_shape[b] for b in lay.p_kept})
        sizes["A" + side], sizes["S" + side] = a_sizes, s_sizes
        presum["A" + side] = lay.obt
    factor = math.prod(p_shape[b] for b, kind in common.items() if kind is S.INPUT_BLOCK_TILED)
    return _Plan(labels, sizes, presum, factor, (lay1, lay2))


def _step_labels(plan_labels: dict[str, str], step: int, steps) -> str:
    left, right, _ = steps[step]
    union = "".join(dict.fromkeys(plan_labels[left] + plan_labels[right]))
    if step == len(steps) - 1:
        return "nmab"
    later = set("nmab")
    for l2, r2, _ in steps[step + 1:]:
        later |= set(plan_labels.get(l2, "")) | set(plan_labels.get(r2, ""))
    return "".join(c for c in union if c in later)


def _walk(plan: _Plan, order: Order):
    """Yield ``(left, right, result, left labels, right labels, out labels, sizes)`` per step."""
    labels = dict(plan.labels)
    sizes = {k: dict(v) for k, v in plan.sizes.items()}
    steps = _STEPS[order]
    # intermediate names get their labels as soon as they are produced
    for i, (left, right, result) in enumerate(steps):
        out = _step_labels(labels, i, steps)
        merged: dict[str, int] = {}
        for name in (left, right):
            for lab, s in sizes[name].items():
                merged[lab] = max(merged.get(lab, 1), s)
        labels[result] = out
        sizes[result] = {lab: merged[lab] for lab in out}
        yield left, right, result, labels[left], labels[right], out, merged


def _terms(plan: _Plan, order: Order) -> tuple[list[Term], int]:
    terms, peak = [], 0
    for side, lay in zip("12", plan.layouts):
        if plan.presum["A" + side]:
            s = plan.sizes["A" + side]
            o, n = (s["a"], s["n"]) if side == "1" else (s["b"], s["m"])
            base = math.prod(lay.y_shape)
            exps = (1, 0, 1, 0) if side == "1" else (0, 1, 0, 1)
            terms.append(Term(exps, base, o * n * base))
    for _, _, _, _, _, out, merged in _walk(plan, order):
        flops = math.prod(merged.values())
        exps = tuple(1 if merged.get(c, 1) > 1 else 0 for c in "nmab")
        base = math.prod(v for c, v in merged.items() if c not in _BATCH)
        terms.append(Term(exps, base, flops))
        peak = max(peak, math.prod(merged[c] for c in out))
    return terms, peak


def _prune(terms: list[Term]) -> list[Term]:
    kept = []
    for i, t in enumerate(terms):
        dominated = any(
            t.dominated_by(u) and (not u.dominated_by(t) or j < i) for j, u in enumerate(terms) if j != i
        )
        if not dominated:
            kept.append(t)
    return kept


def mjjmp_cost(j1, j2, order: Order, o: int | tuple[int, int], n: int | tuple[int, int]) -> CostEstimate:
    """Leading-order multiply-adds of one order, from shapes and tags only.

    Every pairwise step contributes a monomial in the batch and output sizes;
    monomials dominated by another step's monomial are lower-order terms and
    are dropped before summing.
    """
    o1, o2 = (o, o) if isinstance(o, int) else o
    n1, n2 = (n, n) if isinstance(n, int) else n
    plan = _plan(o1, n1, _shape_of(j1), o2, n2, _shape_of(j2))
    terms, peak = _terms(plan, order)
    kept = _prune(terms)
    return CostEstimate(order, sum(t.flops for t in kept), kept, sum(t.flops for t in terms), peak)


def execution_flops(j1, j2, order: Order, o, n) -> int:
    """Exact multiply-adds :func:`mjjmp_execute` spends, all steps included."""
    o1, o2 = (o, o) if isinstance(o, int) else o
    n1, n2 = (n, n) if isinstance(n, int) else n
    j1, j2 = _shape_of(j1), _shape_of(j2)
    plan = _plan(o1, n1, j1, o2, n2, j2)
    terms, _ = _terms(plan, order)
    total = sum(t.flops for t in terms)
    for j, lay in zip((j1, j2), plan.layouts):
        if Layout.from_tags(j.tags, j.y_shape, j.param_shape) != lay:
            total += j.sub_lead * math.prod(lay.sub_shape)
    if plan.factor != 1:
        total += n1 * n2 * o1 * o2
    return total


def best_order(j1, j2, o, n) -> tuple[Order, dict[Order, CostEstimate]]:
    costs = {order: mjjmp_cost(j1, j2, order, o, n) for order in PRECEDENCE}
    best = min(PRECEDENCE, key=lambda order: (costs[order].flops, PRECEDENCE.index(order)))
    return best, costs


def mjjmp_execute(
    a1: np.ndarray,
    j1: StructuredJacobian,
    j2: StructuredJacobian,
    a2: np.ndarray,
    order: Order | str = "auto",
) -> np.ndarray:
    """``Θ[n1, n2, o1, o2] = Σ A1 · J1 · J2ᵀ · A2ᵀ``.

    ``a1`` is ``(o1, n1, *node shape)``, the cotangent of the first node's
    output for each output probe and input; likewise ``a2``.
    """
    o1, n1 = a1.shape[:2]
    o2, n2 = a2.shape[:2]
    if order == "auto":
        order, _ = best_order(j1, j2, (o1, o2), (n1, n2))
    elif isinstance(order, str):
        order = Order(order)
    plan = _plan(o1, n1, _shape_of(j1), o2, n2, _shape_of(j2))
    ops = {}
    for side, a, j, lay in (("1", a1, j1, plan.layouts[0]), ("2", a2, j2, plan.layouts[1])):
        if math.prod(a.shape[2:]) != math.prod(j.y_shape):
            raise StructureError(f"cotangent shape {a.shape} does not match Jacobian output {j.y_shape}")
        a = a.reshape(a.shape[:2] + tuple(j.y_shape))
        if lay.obt:
            a = T.reduce_sum(a, [ax + 2 for ax in lay.obt])
        ops["A" + side] = a
        ops["S" + side] = _expand(j.subarray, j.layout, lay)
    for left, right, result, l_lab, r_lab, out, _ in _walk(plan, order):
        ops[result] = T.einsum(f"{l_lab},{r_lab}->{out}", ops[left], ops[right], op="mjjmp")
    out = ops["out"]
    if plan.factor != 1:
        out = T.scale(out, plan.factor)
    return out

