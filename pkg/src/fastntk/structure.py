"""Structured Jacobians of linear primitives with respect to one parameter.

The Jacobian ``dy/dθ`` of a linear node is stored as a small subarray plus
axis-level tags saying how to rebuild the rest:

* ``CONSTANT_BLOCK_DIAGONAL`` pairs a y axis with a θ axis of equal extent;
  the Jacobian is ``I_c`` along the pair and the subarray ignores it.
* ``BLOCK_DIAGONAL`` is the same pairing, but blocks differ, so the
  subarray keeps the axis once (on the y side).
* ``OUTPUT_BLOCK_TILED`` marks a y axis the Jacobian is constant along.
* ``INPUT_BLOCK_TILED`` marks a θ axis the Jacobian is constant along.
* ``BLOCK_TILED`` combines one of each.

Every axis not covered by a tag is dense and kept in the subarray, whose
layout is ``(n | 1, kept y axes, kept θ axes)``.
"""

from __future__ import annotations

import contextlib
import enum
import math
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import LinearProgram, transpose_node
from .program import LEAD, Kind, Node, align, apply_node

__all__ = [
    "StructureError",
    "StructureKind",
    "StructureTag",
    "StructuredJacobian",
    "structure_rule",
    "structured_jacobian",
    "reconstruct",
    "dense_node_jacobian",
    "corrupted_rules",
    "set_patch_method",
]


class StructureError(ValueError):
    """Structure tags inconsistent with the arrays they describe."""


class StructureKind(enum.Enum):
    NONE = "NoStructure"
    BLOCK_DIAGONAL = "BlockDiagonal"
    CONSTANT_BLOCK_DIAGONAL = "ConstantBlockDiagonal"
    INPUT_BLOCK_TILED = "InputBlockTiled"
    OUTPUT_BLOCK_TILED = "OutputBlockTiled"
    BLOCK_TILED = "BlockTiled"


S = StructureKind
PAIRED = (S.BLOCK_DIAGONAL, S.CONSTANT_BLOCK_DIAGONAL)


@dataclass(frozen=True)
class StructureTag:
    """One structured axis group; ``counts`` holds the block count ``c``."""

    kind: StructureKind
    output_axes: tuple[int, ...] = ()
    param_axes: tuple[int, ...] = ()
    counts: tuple[int, ...] = ()

    @property
    def c(self) -> int:
        return math.prod(self.counts)


def _cbd(a: int, b: int, c: int) -> StructureTag:
    return StructureTag(S.CONSTANT_BLOCK_DIAGONAL, (a,), (b,), (c,))


def _bd(a: int, b: int, c: int) -> StructureTag:
    return StructureTag(S.BLOCK_DIAGONAL, (a,), (b,), (c,))


def _obt(a: int, c: int) -> StructureTag:
    return StructureTag(S.OUTPUT_BLOCK_TILED, (a,), (), (c,))


def _ibt(b: int, c: int) -> StructureTag:
    return StructureTag(S.INPUT_BLOCK_TILED, (), (b,), (c,))


@dataclass(frozen=True)
class Layout:
    """Axis bookkeeping derived from a tag list."""

    y_shape: tuple[int, ...]
    p_shape: tuple[int, ...]
    pairs: tuple[tuple[int, int, StructureKind], ...]
    obt: tuple[int, ...]
    ibt: tuple[int, ...]

    @property
    def y_kept(self) -> tuple[int, ...]:
        drop = {a for a, _, k in self.pairs if k is S.CONSTANT_BLOCK_DIAGONAL} | set(self.obt)
        return tuple(a for a in range(len(self.y_shape)) if a not in drop)

    @property
    def p_kept(self) -> tuple[int, ...]:
        drop = {b for _, b, _ in self.pairs} | set(self.ibt)
        return tuple(b for b in range(len(self.p_shape)) if b not in drop)

    @property
    def bd(self) -> dict[int, int]:
        return {a: b for a, b, k in self.pairs if k is S.BLOCK_DIAGONAL}

    @property
    def sub_shape(self) -> tuple[int, ...]:
        return tuple(self.y_shape[a] for a in self.y_kept) + tuple(self.p_shape[b] for b in self.p_kept)

    @classmethod
    def from_tags(cls, tags, y_shape, p_shape) -> Layout:
        pairs, obt, ibt = [], [], []
        for tag in tags:
            if tag.kind in PAIRED:
                if len(tag.output_axes) != len(tag.param_axes):
                    raise StructureError(f"{tag.kind.value} needs paired axes, got {tag}")
                pairs += [(a, b, tag.kind) for a, b in zip(tag.output_axes, tag.param_axes)]
            elif tag.kind is S.OUTPUT_BLOCK_TILED:
                obt += tag.output_axes
            elif tag.kind is S.INPUT_BLOCK_TILED:
                ibt += tag.param_axes
            elif tag.kind is S.BLOCK_TILED:
                obt += tag.output_axes
                ibt += tag.param_axes
        ys = [a for a, _, _ in pairs] + obt
        ps = [b for _, b, _ in pairs] + ibt
        if len(set(ys)) != len(ys) or len(set(ps)) != len(ps):
            raise StructureError(f"tags overlap on an axis: {list(tags)}")
        if any(not 0 <= a < len(y_shape) for a in ys) or any(not 0 <= b < len(p_shape) for b in ps):
            raise StructureError(f"tag axis out of range for y {y_shape} and θ {p_shape}")
        for a, b, kind in pairs:
            if y_shape[a] != p_shape[b]:
                raise StructureError(f"{kind.value} pairs y axis {a} ({y_shape[a]}) with θ axis {b} ({p_shape[b]})")
        return cls(tuple(y_shape), tuple(p_shape), tuple(pairs), tuple(obt), tuple(ibt))


@dataclass
class StructuredJacobian:
    """Subarray and tags of ``dy/dθ``; ``y_shape`` may be a reshaped view of the node output."""

    subarray: np.ndarray
    tags: tuple[StructureTag, ...]
    y_shape: tuple[int, ...]
    param_shape: tuple[int, ...]
    node_shape: tuple[int, ...]
    fallback: bool = False
    mode: str = "rule"

    @property
    def layout(self) -> Layout:
        return Layout.from_tags(self.tags, self.y_shape, self.param_shape)

    @property
    def full_shape(self) -> tuple[int, int]:
        return math.prod(self.y_shape), math.prod(self.param_shape)

    @property
    def j(self) -> int:
        """Stored entries per example."""
        return math.prod(self.subarray.shape[1:])

    def matrix(self) -> np.ndarray:
        """Dense ``(n | 1, Y, P)`` Jacobian."""
        return reconstruct(self)


# ---------------------------------------------------------------------------
# rules


def _matmul_rule(node: Node, slot: int, const: np.ndarray | None):
    lhs, so = node.attr("subscripts").split("->")
    terms = lhs.split(",")
    s_theta, s_const = terms[slot], terms[1 - slot]
    tags = []
    for a, label in enumerate(so):
        if label in s_theta and label not in s_const:
            tags.append(_cbd(a, s_theta.index(label), node.shape[a]))
    if const is None:
        return tags, None
    kept_y = "".join(lab for lab in so if lab in s_const and lab not in s_theta)
    kept_p = "".join(lab for lab in s_theta if lab not in so)
    sub = T.einsum(f"KN{s_const}->N{kept_y}{kept_p}", const, op="extract")
    return tags, sub


_PATCH_METHOD = ["conv"]
_NO_CONST = np.zeros((1, 1))


def set_patch_method(method: str) -> None:
    """``conv`` (depthwise identity-filter extraction) or ``roll`` (shifted copies)."""
    if method not in ("conv", "roll"):
        raise ValueError(f"patch method must be 'conv' or 'roll', got {method!r}")
    _PATCH_METHOD[0] = method


def extract_patches(x: np.ndarray, fh: int, fw: int) -> np.ndarray:
    """Lifted ``(1, n, H, W, C)`` image to ``(n, H, W, FH, FW, C)`` circular patches."""
    h, w, c = x.shape[-3:]
    d, f = h * w, fh * fw
    n = x.shape[1]
    cost = n * d * f * c * (f if _PATCH_METHOD[0] == "conv" else 1)
    T.add_flops(cost, "extract")
    taps = [np.roll(x[0], shift=(-di, -dj), axis=(-3, -2)) for _, _, di, dj in T.conv_offsets(fh, fw)]
    out = np.stack(taps, axis=-2).reshape((n, h, w, fh, fw, c))
    return T.track(out)


def _conv_rule(node: Node, slot: int, const: np.ndarray | None, in_shapes):
    if slot != 1:
        return None
    tags = [_cbd(2, 3, node.shape[2])]
    if const is None:
        return tags, None
    fh, fw = in_shapes[1][:2]
    return tags, extract_patches(const, fh, fw)


def _mul_rule(node: Node, slot: int, const: np.ndarray | None, in_shapes):
    rank = len(node.shape)
    p_shape, c_shape = in_shapes[slot], in_shapes[1 - slot]
    p_off, c_off = rank - len(p_shape), rank - len(c_shape)
    tags, kept_y, squeeze, p_unit = [], [], [], []
    for a, extent in enumerate(node.shape):
        b = a - p_off
        ce = c_shape[a - c_off] if a >= c_off else 1
        if b >= 0 and p_shape[b] == extent:
            if ce == extent and extent > 1:
                tags.append(_bd(a, b, extent))
                kept_y.append(a)
            else:
                tags.append(_cbd(a, b, extent))
                squeeze.append(a)
        else:
            kept_y.append(a)
            if b >= 0:
                p_unit.append(b)
    if const is None:
        return tags, None
    c = align(const, rank)
    c = c.reshape(c.shape[1:])
    index = tuple(0 if a in squeeze else slice(None) for a in range(rank))
    c = np.broadcast_to(c[(slice(None),) + index], (c.shape[0],) + tuple(node.shape[a] for a in kept_y))
    sub = T.track(np.ascontiguousarray(c).reshape(c.shape + (1,) * len(p_unit)))
    T.add_flops(sub.size, "extract")
    return tags, sub


def _additive_rule(node: Node, slot: int, in_shapes):
    rank = len(node.shape)
    p_shape = in_shapes[slot]
    off = rank - len(p_shape)
    tags = []
    for a, extent in enumerate(node.shape):
        b = a - off
        if b >= 0 and p_shape[b] == extent:
            tags.append(_cbd(a, b, extent))
        else:
            tags.append(_obt(a, extent))
    return tags


def _scalar_sub(value: float, rank_kept: int) -> np.ndarray:
    T.add_flops(1, "extract")
    return np.full((1,) + (1,) * rank_kept, float(value))


def structure_rule(node: Node, slot: int, in_shapes) -> list[StructureTag]:
    """Tags of ``d node / d input[slot]``; a single ``NoStructure`` tag when unannotated."""
    out = _rule(node, slot, None, in_shapes)
    return [StructureTag(S.NONE)] if out is None else out[0]


def _rule(node: Node, slot: int, const, in_shapes):
    """``(tags, subarray | None)`` or ``None`` when the kind has no rule."""
    kind = node.kind
    if kind is Kind.RELU:
        from .autodiff import UnsupportedPrimitiveError

        raise UnsupportedPrimitiveError("Relu is not linear; linearize first")
    if kind is Kind.MATMUL:
        return _matmul_rule(node, slot, const)
    if kind is Kind.CONV:
        return _conv_rule(node, slot, const, in_shapes)
    if kind is Kind.MUL:
        return _mul_rule(node, slot, const, in_shapes)
    if kind in (Kind.ADD, Kind.SUB):
        tags = _additive_rule(node, slot, in_shapes)
        value = -1.0 if kind is Kind.SUB and slot == 1 else 1.0
    elif kind is Kind.SCALE:
        tags = [_cbd(a, a, e) for a, e in enumerate(node.shape)]
        value = node.attr("scale")
    elif kind is Kind.RESHAPE:
        # indexed through the parameter-shaped view of y
        tags = [_cbd(a, a, e) for a, e in enumerate(in_shapes[0])]
        value = 1.0
    elif kind is Kind.TRANSPOSE:
        tags = [_cbd(a, p, node.shape[a]) for a, p in enumerate(node.attr("perm"))]
        value = 1.0
    elif kind is Kind.BROADCAST:
        dims, s = node.attr("dims"), in_shapes[0]
        tags = []
        for a, extent in enumerate(node.shape):
            if a in dims and s[dims.index(a)] == extent:
                tags.append(_cbd(a, dims.index(a), extent))
            else:
                tags.append(_obt(a, extent))
        value = 1.0
    elif kind is Kind.REDUCE_SUM:
        axes, s = node.attr("axes"), in_shapes[0]
        kept = [b for b in range(len(s)) if b not in axes]
        tags = [_cbd(a, b, s[b]) for a, b in enumerate(kept)] + [_ibt(b, s[b]) for b in axes]
        value = 1.0
    elif kind is Kind.GAP:
        h, w, c = in_shapes[0]
        tags = [_cbd(0, 2, c), _ibt(0, h), _ibt(1, w)]
        value = 1.0 / (h * w)
    else:
        return None
    if const is None:
        return tags, None
    layout = Layout.from_tags(tags, _y_view(node, slot, in_shapes), in_shapes[slot])
    return tags, _scalar_sub(value, len(layout.sub_shape)).reshape((1,) + layout.sub_shape)


def _y_view(node: Node, slot: int, in_shapes) -> tuple[int, ...]:
    return tuple(in_shapes[0]) if node.kind is Kind.RESHAPE else node.shape


# ---------------------------------------------------------------------------
# extraction


@contextlib.contextmanager
def corrupted_rules(factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale every closed-form subarray, breaking equivalence on purpose."""
    _CORRUPTION[0] = factor
    try:
        yield
    finally:
        _CORRUPTION[0] = 1.0


_CORRUPTION = [1.0]


def _context(lin: LinearProgram, node: Node):
    slot = node.param_slot
    if slot is None:
        raise StructureError(f"node {node.id} reads no parameter")
    in_shapes = [lin.shape_of(r) for r in node.inputs]
    operands = [lin.consts[r.index] if r.source == "const" else None for r in node.inputs]
    return slot, in_shapes, operands


def _forward_subarray(node, slot, in_shapes, operands, layout: Layout) -> np.ndarray:
    p_shape = in_shapes[slot]
    kept = layout.p_kept
    k = math.prod(p_shape[b] for b in kept)
    probe = np.zeros((k,) + tuple(p_shape))
    index: list = [np.arange(k)]
    grid = np.unravel_index(np.arange(k), tuple(p_shape[b] for b in kept)) if kept else ()
    bd_p = set(layout.bd.values())
    for b in range(len(p_shape)):
        if b in kept:
            index.append(grid[kept.index(b)])
        elif b in bd_p:
            index.append(slice(None))
        else:
            index.append(0)
    _assign(probe, index, 1.0)
    # other tangent inputs contribute nothing to dy/dθ
    args = [
        probe.reshape((k, 1) + tuple(p_shape))
        if i == slot
        else (operands[i] if operands[i] is not None else np.zeros((1, 1) + tuple(in_shapes[i])))
        for i in range(len(operands))
    ]
    out = apply_node(node, args)
    out = out.reshape(out.shape[:LEAD] + layout.y_shape)
    drop = {a for a, _, kd in layout.pairs if kd is S.CONSTANT_BLOCK_DIAGONAL} | set(layout.obt)
    out = out[(slice(None), slice(None)) + tuple(0 if a in drop else slice(None) for a in range(len(layout.y_shape)))]
    # (K, n, y_kept) -> (n, y_kept, θ_kept)
    out = np.moveaxis(out, 0, -1)
    return np.ascontiguousarray(out.reshape(out.shape[:-1] + tuple(p_shape[b] for b in kept)))


def _reverse_subarray(node, slot, in_shapes, operands, layout: Layout) -> np.ndarray:
    y_shape = layout.y_shape
    bd = layout.bd
    dense_y = tuple(a for a in layout.y_kept if a not in bd)
    k = math.prod(y_shape[a] for a in dense_y)
    probe = np.zeros((k,) + y_shape)
    index: list = [np.arange(k)]
    grid = np.unravel_index(np.arange(k), tuple(y_shape[a] for a in dense_y)) if dense_y else ()
    for a in range(len(y_shape)):
        if a in dense_y:
            index.append(grid[dense_y.index(a)])
        elif a in bd:
            index.append(slice(None))
        else:
            index.append(0)
    _assign(probe, index, 1.0)
    g = probe.reshape((k, 1) + node.shape)
    n = max([op.shape[1] for op in operands if op is not None] or [1])
    g = np.ascontiguousarray(np.broadcast_to(g, (k, n) + node.shape))
    ct = transpose_node(node, g, operands, slot, in_shapes)
    p_shape = in_shapes[slot]
    drop = {b for _, b, kd in layout.pairs if kd is S.CONSTANT_BLOCK_DIAGONAL} | set(layout.ibt)
    ct = ct[(slice(None), slice(None)) + tuple(0 if b in drop else slice(None) for b in range(len(p_shape)))]
    remaining = [b for b in range(len(p_shape)) if b not in drop]
    nd = len(dense_y)
    ct = ct.reshape(tuple(y_shape[a] for a in dense_y) + ct.shape[1:])
    perm = [nd]
    for a in layout.y_kept:
        perm.append(dense_y.index(a) if a in dense_y else nd + 1 + remaining.index(bd[a]))
    perm += [nd + 1 + remaining.index(b) for b in layout.p_kept]
    return np.ascontiguousarray(np.transpose(ct, perm))


def _assign(arr: np.ndarray, index: list, value: float) -> None:
    # advanced indices broadcast together; slices stay whole
    arr[tuple(index)] = value


def structured_jacobian(lin: LinearProgram, node: Node, mode: str = "rule") -> StructuredJacobian:
    """Subarray and tags of ``d node / d θ`` for the parameter input of ``node``."""
    if mode not in ("rule", "forward", "reverse", "auto"):
        raise ValueError(f"unknown Jacobian mode {mode!r}")
    slot, in_shapes, operands = _context(lin, node)
    y_shape = _y_view(node, slot, in_shapes)
    p_shape = tuple(in_shapes[slot])
    fallback = False
    const = next((op for i, op in enumerate(operands) if i != slot and op is not None), None)
    if mode == "rule":
        out = _rule(node, slot, const if const is not None else _NO_CONST, in_shapes)
        if out is not None:
            tags, sub = out
            if _CORRUPTION[0] != 1.0:
                sub = sub * _CORRUPTION[0]
            return StructuredJacobian(sub, tuple(tags), y_shape, p_shape, node.shape, False, "rule")
        fallback, mode = True, "auto"
    tags = structure_rule(node, slot, in_shapes)
    if tags and tags[0].kind is S.NONE:
        tags = []
    layout = Layout.from_tags(tags, y_shape, p_shape)
    if mode == "auto":
        k_fwd = math.prod(p_shape[b] for b in layout.p_kept)
        k_rev = math.prod(y_shape[a] for a in layout.y_kept if a not in layout.bd)
        mode = "forward" if k_fwd < k_rev else "reverse"
    if mode == "forward":
        sub = _forward_subarray(node, slot, in_shapes, operands, layout)
    else:
        sub = _reverse_subarray(node, slot, in_shapes, operands, layout)
    return StructuredJacobian(sub, tuple(tags), y_shape, p_shape, node.shape, fallback, mode)


def reconstruct(sj: StructuredJacobian) -> np.ndarray:
    """Expand tags back into the dense ``(n | 1, Y, P)`` Jacobian."""
    layout = sj.layout
    if tuple(sj.subarray.shape[1:]) != layout.sub_shape:
        raise StructureError(f"subarray shape {sj.subarray.shape[1:]} does not match tags ({layout.sub_shape})")
    letters = iter("abcdefghijklmopqrstuvwxyzABCDEFGHIJKLMOPQRSTUVWXYZ")
    y_lab = [next(letters) for _ in sj.y_shape]
    p_lab = [next(letters) for _ in sj.param_shape]
    terms = ["n" + "".join(y_lab[a] for a in layout.y_kept) + "".join(p_lab[b] for b in layout.p_kept)]
    operands = [sj.subarray]
    # eye over a pair places the subarray on the diagonal for both pair kinds
    for a, b, _ in layout.pairs:
        terms.append(y_lab[a] + p_lab[b])
        operands.append(np.eye(sj.y_shape[a]))
    for a in layout.obt:
        terms.append(y_lab[a])
        operands.append(np.ones(sj.y_shape[a]))
    for b in layout.ibt:
        terms.append(p_lab[b])
        operands.append(np.ones(sj.param_shape[b]))
    spec = ",".join(terms) + "->n" + "".join(y_lab) + "".join(p_lab)
    dense = np.einsum(spec, *operands)
    return dense.reshape((dense.shape[0],) + sj.full_shape)


def dense_node_jacobian(lin: LinearProgram, node: Node) -> np.ndarray:
    """Oracle: ``(n | 1, Y, P)`` Jacobian of one node by pushing every basis tangent."""
    slot, in_shapes, operands = _context(lin, node)
    p_shape = tuple(in_shapes[slot])
    p = math.prod(p_shape)
    probe = np.eye(p).reshape((p, 1) + p_shape)
    args = [probe if i == slot else operands[i] for i in range(len(operands))]
    out = apply_node(node, args)
    out = out.reshape(out.shape[:LEAD] + (-1,))
    return np.ascontiguousarray(np.transpose(out, (1, 2, 0)))
