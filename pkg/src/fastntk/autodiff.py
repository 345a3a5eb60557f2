"""Forward and reverse mode over :class:`~fastntk.program.Program`.

Differentiation goes through :func:`linearize`: one primal sweep captures
every value a tangent needs (activations entering products, rectifier
masks) and emits a :class:`LinearProgram` in which each node is linear in
its non-constant inputs. Forward mode evaluates that program on tangent
parameters; reverse mode runs it backwards through per-kind transpose
rules.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .program import (
    LEAD,
    Kind,
    Node,
    Program,
    Ref,
    align,
    apply_node,
    lift_inputs,
    lift_params,
    resolve,
    run,
)
from .tensor import DimensionError

__all__ = [
    "UnsupportedPrimitiveError",
    "LinearProgram",
    "linearize",
    "linear_structure",
    "LinearStructure",
    "jvp",
    "vjp",
    "vjp_sum",
    "jacobian",
    "transpose_node",
    "flatten_params",
    "unflatten_params",
]


class UnsupportedPrimitiveError(NotImplementedError):
    """A primitive without a differentiation rule."""


def flatten_params(blocks, lead: int = 0) -> np.ndarray:
    """Concatenate parameter-shaped blocks along one flat axis after ``lead`` axes."""
    blocks = [np.asarray(b) for b in blocks]
    return np.concatenate([b.reshape(b.shape[:lead] + (-1,)) for b in blocks], axis=-1)


def unflatten_params(flat, shapes, lead: int = 0) -> list[np.ndarray]:
    flat = np.asarray(flat)
    out, start = [], 0
    for s in shapes:
        size = math.prod(s)
        out.append(flat[..., start: start + size].reshape(flat.shape[:lead] + tuple(s)))
        start += size
    return out


# ---------------------------------------------------------------------------
# transpose rules


def _unbroadcast(g: np.ndarray, in_shape: tuple, out_shape: tuple) -> np.ndarray:
    rank, r = len(out_shape), len(in_shape)
    axes = list(range(rank - r)) + [
        rank - r + i for i, s in enumerate(in_shape) if s == 1 and out_shape[rank - r + i] != 1
    ]
    if axes:
        g = T.reduce_sum(g, [a + LEAD for a in axes])
    return g.reshape(g.shape[:LEAD] + tuple(in_shape))


def transpose_node(
    node: Node,
    g: np.ndarray,
    operands: list,
    slot: int,
    in_shapes: list[tuple],
    *,
    sum_batch: bool = False,
) -> np.ndarray:
    """Cotangent of input ``slot`` of a linear node given the output cotangent ``g``.

    ``operands`` holds the constant operands of bilinear kinds (the entry at
    ``slot`` is ignored). With ``sum_batch`` the batch axis is summed and
    comes back with extent 1.
    """
    kind = node.kind
    summed = False
    if kind is Kind.MATMUL:
        lhs, so = node.attr("subscripts").split("->")
        sa, sb = lhs.split(",")
        lead_out = "K" if sum_batch else "KN"
        if slot == 0:
            r = T.einsum(f"KN{so},KN{sb}->{lead_out}{sa}", g, operands[1], op="matmul")
        else:
            r = T.einsum(f"KN{sa},KN{so}->{lead_out}{sb}", operands[0], g, op="matmul")
        summed = sum_batch
    elif kind is Kind.CONV:
        if slot == 0:
            r = T.conv2d_circular_transpose_input(g, operands[1])
        else:
            fh, fw = in_shapes[1][:2]
            r = T.conv2d_circular_transpose_filter(operands[0], g, (fh, fw), lead_out="K" if sum_batch else "...")
            summed = sum_batch
    elif kind is Kind.MUL:
        rank = len(node.shape)
        r = _unbroadcast(T.mul(align(g, rank), align(operands[1 - slot], rank)), in_shapes[slot], node.shape)
    elif kind in (Kind.ADD, Kind.SUB):
        r = _unbroadcast(g, in_shapes[slot], node.shape)
        if kind is Kind.SUB and slot == 1:
            r = T.scale(r, -1.0)
    elif kind is Kind.SCALE:
        r = T.scale(g, node.attr("scale"))
    elif kind is Kind.RESHAPE:
        r = T.reshape(g, g.shape[:LEAD] + tuple(in_shapes[0]))
    elif kind is Kind.TRANSPOSE:
        inv = np.argsort(node.attr("perm"))
        r = T.transpose(g, (0, 1) + tuple(int(p) + LEAD for p in inv))
    elif kind is Kind.BROADCAST:
        dims, s = node.attr("dims"), in_shapes[0]
        axes = [a for a in range(len(node.shape)) if a not in dims]
        axes += [d for i, d in enumerate(dims) if s[i] == 1 and node.shape[d] != 1]
        r = T.reduce_sum(g, [a + LEAD for a in axes]) if axes else g
        r = r.reshape(g.shape[:LEAD] + tuple(s))
    elif kind is Kind.REDUCE_SUM:
        s = in_shapes[0]
        kept = [i for i in range(len(s)) if i not in node.attr("axes")]
        r = T.broadcast_in_dim(g, g.shape[:LEAD] + tuple(s), (0, 1) + tuple(k + LEAD for k in kept))
    elif kind is Kind.GAP:
        h, w, c = in_shapes[0]
        r = T.broadcast_in_dim(T.scale(g, 1.0 / (h * w)), g.shape[:LEAD] + (h, w, c), (0, 1, 4))
    else:
        raise UnsupportedPrimitiveError(f"no transpose rule for {kind.value}")
    if sum_batch and not summed:
        r = T.reduce_sum(r, [1])
    if sum_batch:
        r = r.reshape((r.shape[0], 1) + tuple(in_shapes[slot]))
    return r


# ---------------------------------------------------------------------------
# linear programs


@dataclass
class LinearProgram:
    """Tangent program of ``f`` at a fixed primal point.

    ``param`` refs denote tangent parameters and ``const`` refs index
    ``consts``, which are captured primal values in lifted ``(1, n|1, ...)``
    form. ``output`` is ``None`` when the output does not depend on θ.
    """

    nodes: tuple[Node, ...]
    consts: tuple[np.ndarray, ...]
    param_shapes: tuple[tuple[int, ...], ...]
    output: Ref | None
    out_shape: tuple[int, ...]
    n: int

    @property
    def output_size(self) -> int:
        return math.prod(self.out_shape)

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes)

    def shape_of(self, ref: Ref) -> tuple[int, ...]:
        if ref.source == "node":
            return self.nodes[ref.index].shape
        if ref.source == "param":
            return self.param_shapes[ref.index]
        if ref.source == "const":
            return self.consts[ref.index].shape[LEAD:]
        raise ValueError("linear programs have no input placeholder")

    def consumers(self, param: int) -> list[int]:
        return [node.id for node in self.nodes if node.param_index == param]

    def _resolve(self, ref: Ref, values, tangents):
        if ref.source == "node":
            return values[ref.index]
        if ref.source == "param":
            return tangents[ref.index]
        return self.consts[ref.index]

    def lift_tangents(self, tangents, probes: bool) -> list[np.ndarray]:
        if len(tangents) != len(self.param_shapes):
            raise DimensionError(f"expected {len(self.param_shapes)} tangent arrays, got {len(tangents)}")
        out = []
        for i, (t, s) in enumerate(zip(tangents, self.param_shapes)):
            t = T.as_tensor(t)
            got = t.shape[1:] if probes else t.shape
            if tuple(got) != tuple(s):
                raise DimensionError(f"tangent {i} has shape {t.shape}, expected {'(K, ...)' if probes else ''}{s}")
            out.append(t.reshape((t.shape[0] if probes else 1, 1) + tuple(s)))
        return out

    def forward(self, lifted: list[np.ndarray]) -> np.ndarray:
        """Push lifted tangents ``(K, 1, *shape)`` through; returns ``(K, n, *out)``."""
        values: list = []
        for node in self.nodes:
            values.append(apply_node(node, [self._resolve(r, values, lifted) for r in node.inputs]))
        k = lifted[0].shape[0] if lifted else 1
        if self.output is None:
            return np.zeros((k, self.n) + self.out_shape)
        out = self._resolve(self.output, values, lifted)
        return np.broadcast_to(out, (k, self.n) + self.out_shape)

    def evaluate(self, tangents, *, probes: bool = False) -> np.ndarray:
        """JVP outputs: ``(n, o)``, or ``(K, n, o)`` when tangents carry a probe axis."""
        out = self.forward(self.lift_tangents(tangents, probes))
        out = out.reshape(out.shape[:LEAD] + (self.output_size,))
        return out if probes else out[0]

    def backward(
        self,
        ct: np.ndarray,
        *,
        skip_params: bool = False,
        sum_batch: bool = False,
        record: set[int] | None = None,
        recorded: dict | None = None,
    ) -> Iterator[tuple[int, np.ndarray]]:
        """Reverse sweep yielding ``(param index, cotangent)`` as each completes.

        ``ct`` is ``(K, n, *out)``. A parameter cotangent is emitted once its
        earliest consumer has been transposed, so callers can consume and
        drop it before the sweep moves on. Cotangents are ``(K, n, *shape)``,
        or ``(K, 1, *shape)`` with ``sum_batch``. Output cotangents of nodes
        listed in ``record`` are stored in ``recorded``.
        """
        ct = np.ascontiguousarray(np.broadcast_to(ct, (ct.shape[0], self.n) + self.out_shape))
        k = ct.shape[0]
        remaining = [0] * len(self.param_shapes)
        for node in self.nodes:
            for ref in node.inputs:
                if ref.source == "param":
                    remaining[ref.index] += 1
        node_ct: dict[int, np.ndarray] = {}
        param_ct: dict[int, np.ndarray] = {}

        def accumulate(store, key, value):
            store[key] = T.add(store[key], value) if key in store else value

        def finish(idx):
            shape = self.param_shapes[idx]
            value = param_ct.pop(idx, None)
            if value is None:
                value = np.zeros((k, 1 if sum_batch else self.n) + shape)
            done.add(idx)
            return idx, value

        done: set[int] = set()

        if self.output is not None:
            if self.output.source == "node":
                node_ct[self.output.index] = ct
            elif self.output.source == "param" and not skip_params:
                shape = self.param_shapes[self.output.index]
                value = ct.reshape((k, self.n) + shape)
                if sum_batch:
                    value = T.reduce_sum(value, [1]).reshape((k, 1) + shape)
                param_ct[self.output.index] = value
        for node in reversed(self.nodes):
            g = node_ct.pop(node.id, None)
            if record is not None and node.id in record and recorded is not None:
                recorded[node.id] = g if g is not None else np.zeros((k, self.n) + node.shape)
            in_shapes = [self.shape_of(r) for r in node.inputs]
            operands = [self.consts[r.index] if r.source == "const" else None for r in node.inputs]
            for slot, ref in enumerate(node.inputs):
                if ref.source == "const":
                    continue
                if ref.source == "param":
                    if skip_params:
                        continue
                    if g is not None:
                        c = transpose_node(node, g, operands, slot, in_shapes, sum_batch=sum_batch)
                        accumulate(param_ct, ref.index, c)
                    remaining[ref.index] -= 1
                    if remaining[ref.index] == 0:
                        yield finish(ref.index)
                elif g is not None:
                    accumulate(node_ct, ref.index, transpose_node(node, g, operands, slot, in_shapes))
        if not skip_params:
            for idx in range(len(self.param_shapes)):
                if idx not in done:
                    yield finish(idx)

    def transpose(self, ct: np.ndarray, *, sum_batch: bool = False) -> list[np.ndarray]:
        """All parameter cotangents for ``ct`` of shape ``(K, n, *out)``, in parameter order."""
        result = dict(self.backward(ct, sum_batch=sum_batch))
        return [result[i] for i in range(len(self.param_shapes))]

    def node_cotangents(self, ct: np.ndarray, nodes) -> dict[int, np.ndarray]:
        """Output cotangents of the listed nodes, without weight cotangents."""
        recorded: dict[int, np.ndarray] = {}
        for _ in self.backward(ct, skip_params=True, record=set(nodes), recorded=recorded):
            pass
        return recorded


@dataclass(frozen=True)
class LinearStructure:
    """Shape-only skeleton of a tangent program.

    ``const_sources[i]`` names the primal value captured as constant ``i``:
    a primal :class:`Ref`, or ``("mask", node id)`` for a rectifier mask.
    """

    nodes: tuple[Node, ...]
    const_sources: tuple
    output: Ref | None


def linear_structure(prog: Program) -> LinearStructure:
    """Tangent program of ``prog`` up to the values of its constants."""
    sources: list = []
    const_ids: dict = {}
    nodes: list[Node] = []
    tangent: dict[int, Ref | None] = {}

    def const_of(key) -> Ref:
        if key not in const_ids:
            sources.append(key)
            const_ids[key] = Ref("const", len(sources) - 1)
        return const_ids[key]

    def tangent_of(ref: Ref) -> Ref | None:
        if ref.source == "param":
            return ref
        if ref.source == "node":
            return tangent[ref.index]
        return None

    def emit(kind: Kind, inputs, attrs, shape) -> Ref:
        node = Node(len(nodes), kind, tuple(inputs), tuple(attrs), tuple(shape))
        nodes.append(node)
        return Ref("node", node.id)

    def shape_of(ref: Ref) -> tuple:
        if ref.source == "node":
            return nodes[ref.index].shape
        return prog.param_shapes[ref.index]

    for node in prog.nodes:
        tans = [tangent_of(r) for r in node.inputs]
        if all(t is None for t in tans):
            tangent[node.id] = None
            continue
        kind = node.kind
        if kind in (Kind.MATMUL, Kind.CONV, Kind.MUL):
            terms = []
            for slot, t in enumerate(tans):
                if t is None:
                    continue
                args = [const_of(r) for r in node.inputs]
                args[slot] = t
                terms.append(emit(kind, args, node.attrs, node.shape))
            out = terms[0] if len(terms) == 1 else emit(Kind.ADD, terms, (), node.shape)
        elif kind in (Kind.ADD, Kind.SUB):
            if all(t is not None for t in tans):
                out = emit(kind, tans, (), node.shape)
            else:
                slot = 0 if tans[0] is not None else 1
                src = shape_of(tans[slot])
                rank = len(node.shape)
                dims = tuple(range(rank - len(src), rank))
                out = emit(Kind.BROADCAST, [tans[slot]], (("dims", dims), ("shape", node.shape)), node.shape)
                if kind is Kind.SUB and slot == 1:
                    out = emit(Kind.SCALE, [out], (("scale", -1.0),), node.shape)
        elif kind is Kind.RELU:
            out = emit(Kind.MUL, [tans[0], const_of(("mask", node.id))], (), node.shape)
        elif kind.is_linear:
            out = emit(kind, [tans[0]], node.attrs, node.shape)
        else:
            raise UnsupportedPrimitiveError(f"no linearization rule for {kind.value}")
        tangent[node.id] = out

    output = tangent_of(prog.output)
    if output is not None and output.source == "param":
        # keep every parameter behind a node so structured rules see it
        shape = prog.param_shapes[output.index]
        output = emit(Kind.BROADCAST, [output], (("dims", tuple(range(len(shape)))), ("shape", shape)), shape)
    return LinearStructure(tuple(nodes), tuple(sources), output)


def linearize(prog: Program, params, x) -> LinearProgram:
    """Run the primal once and emit the tangent program at that point."""
    lp, lx = lift_params(prog, params), lift_inputs(prog, x)
    values, masks = run(prog, lp, lx, with_masks=True)
    skeleton = linear_structure(prog)
    consts = tuple(
        masks[src[1]] if isinstance(src, tuple) else resolve(src, values, lp, lx, prog.consts)
        for src in skeleton.const_sources
    )
    return LinearProgram(skeleton.nodes, consts, prog.param_shapes, skeleton.output, prog.output_shape, lx.shape[1])


# ---------------------------------------------------------------------------
# public entry points


def jvp(prog: Program, params, x, tangents, *, probes: bool = False) -> np.ndarray:
    """``[df/dθ] θ_t`` per input: ``(n, o)``, or ``(K, n, o)`` with a probe axis."""
    return linearize(prog, params, x).evaluate(tangents, probes=probes)


def _lift_cotangent(lin: LinearProgram, ct, probes: bool) -> np.ndarray:
    ct = T.as_tensor(ct)
    expect = (lin.n, lin.output_size)
    got = ct.shape[1:] if probes else ct.shape
    if tuple(got) != expect:
        raise DimensionError(f"cotangent has shape {ct.shape}, expected {'(K, ...)' if probes else ''}{expect}")
    if not probes:
        ct = ct[None]
    return ct.reshape(ct.shape[:LEAD] + lin.out_shape)


def vjp(prog: Program, params, x, ct, *, probes: bool = False) -> list[np.ndarray]:
    """Per-input weight cotangents ``(n, *shape)`` (or ``(K, n, *shape)``) for ``ct`` of shape ``(n, o)``."""
    lin = linearize(prog, params, x)
    out = lin.transpose(_lift_cotangent(lin, ct, probes))
    return out if probes else [c[0] for c in out]


def vjp_sum(prog: Program, params, x, ct) -> list[np.ndarray]:
    """Gradient convention: weight cotangents summed over the batch."""
    lin = linearize(prog, params, x)
    return [c[0, 0] for c in lin.transpose(_lift_cotangent(lin, ct, False), sum_batch=True)]


def identity_cotangents(lin: LinearProgram) -> np.ndarray:
    """``o`` probes, probe ``a`` being the ``a``-th output basis vector for every input."""
    o = lin.output_size
    eye = np.eye(o).reshape((o, 1) + lin.out_shape)
    return np.ascontiguousarray(np.broadcast_to(eye, (o, lin.n) + lin.out_shape))


def identity_tangents(shapes) -> list[np.ndarray]:
    """``P`` probes spanning parameter space, one basis vector each."""
    total = sum(math.prod(s) for s in shapes)
    return unflatten_params(np.eye(total), shapes, lead=1)


def jacobian(prog: Program, params, x, mode: str = "auto") -> np.ndarray:
    """Dense ``(n, o, P)`` Jacobian, parameters flattened in order."""
    if mode not in ("forward", "reverse", "auto"):
        raise ValueError(f"mode must be forward, reverse or auto, got {mode!r}")
    lin = linearize(prog, params, x)
    p, n, o = lin.num_params, lin.n, lin.output_size
    if mode == "auto":
        mode = "forward" if p < n * o else "reverse"
    if mode == "forward":
        out = lin.evaluate(identity_tangents(lin.param_shapes), probes=True)
        return np.ascontiguousarray(np.transpose(out, (1, 2, 0)))
    cts = lin.transpose(identity_cotangents(lin))
    return np.ascontiguousarray(np.transpose(flatten_params(cts, lead=2), (1, 0, 2)))
