"""Shape-only FLOP and memory prediction for the three NTK methods.

:func:`predict_generic` walks the program and its tangent skeleton without
touching numbers, pricing every sweep exactly as the instrumented kernels
count it. Terms are labelled after the generic cost decomposition:

* Jacobian contraction: ``N[FP]`` (primal), ``NO[FP]`` (Jacobians), ``N²O²P``.
* NTK-vector products: ``N[FP]``, ``NO[FP]`` (VJPs), ``N²O[FP]`` (JVPs).
* Structured derivatives: ``N[FP]``, ``NO[FP]`` (cotangents), ``MJJMP``, ``NJ``.

:func:`predict_table` evaluates the closed forms for the reference FCN and
CNN families instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .autodiff import linear_structure
from .mjjmp import JacobianShape, best_order, execution_flops
from .ntk import CONCRETE, Method, ntk
from .program import Kind, ModelSpec, Node, Program, Ref, build, draw_inputs, init_params
from .structure import Layout, StructureKind, _PATCH_METHOD, _y_view, structure_rule

__all__ = [
    "CostEstimate",
    "forward_flops",
    "predict_generic",
    "predict_table",
    "select_method",
    "validate_against_counter",
]

BYTES = 8

# phase recorded by the ntk functions for each breakdown label
_PHASES = {
    Method.JACOBIAN_CONTRACTION: {"N[FP]": ("forward",), "NO[FP]": ("jacobian",), "N²O²P": ("contract",)},
    Method.NTK_VECTOR_PRODUCTS: {"N[FP]": ("forward",), "NO[FP]": ("vjp",), "N²O[FP]": ("jvp",)},
    Method.STRUCTURED_DERIVATIVES: {
        "N[FP]": ("forward",),
        "NO[FP]": ("cotangents",),
        "NJ": ("extract",),
        "MJJMP": ("mjjmp",),
    },
}


@dataclass
class CostEstimate:
    method: Method
    flops: float
    memory_bytes: int
    breakdown: list[tuple[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "predicted_flops": self.flops,
            "memory_bytes": self.memory_bytes,
            "breakdown": [{"term": k, "value": v} for k, v in self.breakdown],
        }


# ---------------------------------------------------------------------------
# per-node prices


def _unique_label_product(node: Node, in_shapes) -> int:
    lhs = node.attr("subscripts").split("->")[0]
    sizes = {}
    for term, shape in zip(lhs.split(","), in_shapes):
        sizes.update(zip(term, shape))
    return math.prod(sizes.values())


def node_flops(node: Node, in_shapes) -> int:
    """Per-example multiply-adds of applying ``node`` once."""
    kind = node.kind
    if kind is Kind.MATMUL:
        return _unique_label_product(node, in_shapes)
    if kind is Kind.CONV:
        h, w, ci = in_shapes[0]
        fh, fw, _, co = in_shapes[1]
        return h * w * fh * fw * ci * co
    if kind in (Kind.ADD, Kind.SUB, Kind.MUL, Kind.SCALE, Kind.RELU):
        return math.prod(node.shape)
    if kind in (Kind.REDUCE_SUM, Kind.GAP):
        return math.prod(in_shapes[0])
    return 0


def _has_unbroadcast(in_shape, out_shape) -> bool:
    rank, r = len(out_shape), len(in_shape)
    return r < rank or any(s == 1 and out_shape[rank - r + i] != 1 for i, s in enumerate(in_shape))


def transpose_flops(node: Node, slot: int, in_shapes, sum_batch: bool = False) -> int:
    """Per-(probe, example) multiply-adds of one transpose rule, batch reduction included."""
    kind = node.kind
    out = math.prod(node.shape)
    size_in = math.prod(in_shapes[slot])
    summed = False
    if kind in (Kind.MATMUL, Kind.CONV):
        cost = node_flops(node, in_shapes)
        summed = sum_batch and (kind is Kind.MATMUL or slot == 1)
    elif kind is Kind.MUL:
        cost = out + (out if _has_unbroadcast(in_shapes[slot], node.shape) else 0)
    elif kind in (Kind.ADD, Kind.SUB):
        cost = out if _has_unbroadcast(in_shapes[slot], node.shape) else 0
        if kind is Kind.SUB and slot == 1:
            cost += size_in
    elif kind is Kind.SCALE:
        cost = out
    elif kind is Kind.BROADCAST:
        dims, s = node.attr("dims"), in_shapes[0]
        axes = [a for a in range(len(node.shape)) if a not in dims]
        axes += [d for i, d in enumerate(dims) if s[i] == 1 and node.shape[d] != 1]
        cost = out if axes else 0
    elif kind is Kind.GAP:
        cost = out
    else:
        cost = 0
    if sum_batch and not summed:
        cost += size_in
    return cost


# ---------------------------------------------------------------------------
# symbolic sweeps


@dataclass
class _Sweeps:
    """Batch-dependence bookkeeping shared by the sweep prices of one program."""

    prog: Program

    def __post_init__(self):
        prog = self.prog
        self.batched = []
        for node in prog.nodes:
            self.batched.append(any(self._primal_batched(r) for r in node.inputs))
        self.skeleton = linear_structure(prog)
        self.const_batched = [
            self.batched[src[1]] if isinstance(src, tuple) else self._primal_batched(src)
            for src in self.skeleton.const_sources
        ]
        self.in_shapes = [[self._lshape(r) for r in node.inputs] for node in self.skeleton.nodes]

    def _primal_batched(self, ref: Ref) -> bool:
        if ref.source == "input":
            return True
        if ref.source == "node":
            return self.batched[ref.index]
        return False

    def _lshape(self, ref: Ref) -> tuple:
        if ref.source == "node":
            return self.skeleton.nodes[ref.index].shape
        if ref.source == "param":
            return self.prog.param_shapes[ref.index]
        src = self.skeleton.const_sources[ref.index]
        if isinstance(src, tuple):
            return self.prog.nodes[src[1]].shape
        return self.prog.shape_of(src)

    def fp(self, n: int) -> int:
        total = 0
        for node, batched in zip(self.prog.nodes, self.batched):
            in_shapes = [self.prog.shape_of(r) for r in node.inputs]
            total += node_flops(node, in_shapes) * (n if batched else 1)
        return total

    def _tangent_batched(self) -> list[bool]:
        out = []
        for node in self.skeleton.nodes:
            flag = False
            for r in node.inputs:
                if r.source == "node":
                    flag |= out[r.index]
                elif r.source == "const":
                    flag |= self.const_batched[r.index]
            out.append(flag)
        return out

    def jvp(self, k: int, n: int) -> int:
        total = 0
        for node, shapes, batched in zip(self.skeleton.nodes, self.in_shapes, self._tangent_batched()):
            total += node_flops(node, shapes) * k * (n if batched else 1)
        return total

    def _reached(self) -> set[int]:
        reached = set()
        out = self.skeleton.output
        if out is not None and out.source == "node":
            reached.add(out.index)
        for node in reversed(self.skeleton.nodes):
            if node.id in reached:
                reached.update(r.index for r in node.inputs if r.source == "node")
        return reached

    def vjp(self, k: int, n: int, *, skip_params: bool = False, sum_batch: bool = False) -> int:
        reached = self._reached()
        total = 0
        seen: set = set()
        for node in reversed(self.skeleton.nodes):
            if node.id not in reached:
                continue
            shapes = self.in_shapes[node.id]
            for slot, ref in enumerate(node.inputs):
                if ref.source == "const" or (ref.source == "param" and skip_params):
                    continue
                param = ref.source == "param"
                sb = sum_batch and param
                total += transpose_flops(node, slot, shapes, sb) * k * n
                key = (ref.source, ref.index)
                if key in seen:
                    total += math.prod(shapes[slot]) * k * (1 if sb else n)
                seen.add(key)
        return total

    def sub_lead(self, node: Node, n: int) -> int:
        return n if any(self.const_batched[r.index] for r in node.inputs if r.source == "const") else 1

    def extract(self, n: int) -> int:
        total = 0
        for node in self._consumer_nodes():
            shapes = self.in_shapes[node.id]
            slot = node.param_slot
            lead = self.sub_lead(node, n)
            kind = node.kind
            if kind is Kind.MATMUL:
                const = node.inputs[1 - slot]
                total += math.prod(self._lshape(const)) * lead
            elif kind is Kind.CONV and slot == 1:
                h, w, c = shapes[0]
                f = math.prod(shapes[1][:2])
                total += lead * h * w * f * c * (f if _PATCH_METHOD[0] == "conv" else 1)
            elif kind is Kind.CONV:
                total += self._fallback_extract(node, shapes, n)
            elif kind is Kind.MUL:
                layout = self._layout(node)
                total += lead * math.prod(layout.y_shape[a] for a in layout.y_kept)
            else:
                total += 1
        return total

    def _fallback_extract(self, node: Node, shapes, n: int) -> int:
        layout = Layout.from_tags([], _y_view(node, node.param_slot, shapes), shapes[node.param_slot])
        k_fwd = math.prod(layout.p_shape)
        k_rev = math.prod(layout.y_shape)
        if k_fwd < k_rev:
            return node_flops(node, shapes) * k_fwd * self.sub_lead(node, n)
        return transpose_flops(node, node.param_slot, shapes) * k_rev * n

    def _consumer_nodes(self) -> list[Node]:
        return [node for node in self.skeleton.nodes if node.param_slot is not None]

    def tags(self, node: Node):
        tags = structure_rule(node, node.param_slot, self.in_shapes[node.id])
        return () if tags and tags[0].kind is StructureKind.NONE else tuple(tags)

    def _layout(self, node: Node) -> Layout:
        shapes = self.in_shapes[node.id]
        slot = node.param_slot
        return Layout.from_tags(self.tags(node), _y_view(node, slot, shapes), shapes[slot])

    def jacobian_shape(self, node: Node, n: int) -> JacobianShape:
        shapes = self.in_shapes[node.id]
        slot = node.param_slot
        tags = self.tags(node)
        lead = self.sub_lead(node, n)
        if node.kind is Kind.CONV and slot == 0:
            tags, lead = (), n
        return JacobianShape(tags, _y_view(node, slot, shapes), tuple(shapes[slot]), lead)

    def mjjmp(self, o: int, n1: int, n2: int) -> int:
        total = 0
        groups: dict[int, list[Node]] = {}
        for node in self._consumer_nodes():
            groups.setdefault(node.param_index, []).append(node)
        for idx in sorted(groups):
            for a in groups[idx]:
                for b in groups[idx]:
                    j1, j2 = self.jacobian_shape(a, n1), self.jacobian_shape(b, n2)
                    order, _ = best_order(j1, j2, o, (n1, n2))
                    total += execution_flops(j1, j2, order, o, (n1, n2)) + n1 * n2 * o * o
        return total


def forward_flops(prog: Program, n: int = 1) -> int:
    """Multiply-adds of one primal evaluation on ``n`` inputs."""
    return _Sweeps(prog).fp(n)


def _batch(n) -> tuple[int, int]:
    return (n, n) if isinstance(n, int) else (int(n[0]), int(n[1]))


def _memory(prog: Program, sw: _Sweeps, method: Method, n1: int, n2: int, o: int) -> int:
    n = max(n1, n2)
    y_l = max((math.prod(node.shape) for node in prog.nodes), default=0)
    y = sum(math.prod(node.shape) for node in prog.nodes)
    p_l = max((math.prod(s) for s in prog.param_shapes), default=0)
    p = prog.num_params
    if method is Method.STRUCTURED_DERIVATIVES:
        j = 0
        for node in sw._consumer_nodes():
            js = sw.jacobian_shape(node, 1)
            j = max(j, math.prod(Layout.from_tags(js.tags, js.y_shape, js.param_shape).sub_shape))
        terms = [n1 * n2 * o * o, n * o * y_l, n * j, n * y, p]
    else:
        terms = [n1 * n2 * o * o, n * o * (y_l + p_l), n * y, p]
    return BYTES * max(terms)


def predict_generic(prog: Program, method, n, o: int | None = None, *, shared: bool = False) -> CostEstimate:
    """Predicted multiply-adds and peak bytes of one method on batches ``n = (n1, n2)``.

    ``shared`` prices the ``x2 = x1`` case, where second-side work is reused.
    """
    method = Method.parse(method)
    if method is Method.AUTO:
        raise ValueError("predict_generic needs a concrete method")
    n1, n2 = _batch(n)
    o = prog.output_size if o is None else o
    if o != prog.output_size:
        raise ValueError(f"program has {prog.output_size} outputs, not {o}")
    sw = _Sweeps(prog)
    sides = (n1,) if shared else (n1, n2)
    fp = sum(sw.fp(k) for k in sides)
    if method is Method.JACOBIAN_CONTRACTION:
        jac = sum(sw.vjp(o, k) for k in sides)
        contract = sum(n1 * n2 * o * o * (math.prod(s) + 1) for s in prog.param_shapes)
        breakdown = [("N[FP]", fp), ("NO[FP]", jac), ("N²O²P", contract)]
    elif method is Method.NTK_VECTOR_PRODUCTS:
        breakdown = [("N[FP]", fp), ("NO[FP]", sw.vjp(o, n2)), ("N²O[FP]", sw.jvp(o * n2, n1))]
    else:
        cot = sum(sw.vjp(o, k, skip_params=True) for k in sides)
        extract = sum(sw.extract(k) for k in sides)
        breakdown = [("N[FP]", fp), ("NO[FP]", cot), ("MJJMP", sw.mjjmp(o, n1, n2)), ("NJ", extract)]
    flops = sum(v for _, v in breakdown)
    return CostEstimate(method, flops, _memory(prog, sw, method, n1, n2, o), breakdown)


def select_method(prog: Program, n, o: int | None = None, *, objective: str = "time") -> Method:
    """Cheapest concrete method; ties prefer structured derivatives, then vector products."""
    if objective not in ("time", "memory"):
        raise ValueError(f"objective must be 'time' or 'memory', got {objective!r}")
    preference = (Method.STRUCTURED_DERIVATIVES, Method.NTK_VECTOR_PRODUCTS, Method.JACOBIAN_CONTRACTION)
    estimates = {m: predict_generic(prog, m, n, o) for m in preference}

    def key(m):
        e = estimates[m]
        return (e.flops if objective == "time" else e.memory_bytes, preference.index(m))

    return min(preference, key=key)


# ---------------------------------------------------------------------------
# closed forms for the reference families


def _fcn_terms(method: Method, n: int, o: int, t: int, w: int):
    if method is Method.JACOBIAN_CONTRACTION:
        time = [("N²O²TW²", n * n * o * o * t * w * w), ("N²O³W", n * n * o**3 * w)]
        mem = [n * n * o * o, n * o * w * w, n * o * o * w, n * t * w, t * w * w]
    elif method is Method.NTK_VECTOR_PRODUCTS:
        time = [("N²OTW²", n * n * o * t * w * w), ("N²O²W", n * n * o * o * w)]
        mem = [n * n * o * o, n * o * w * w, n * o * o * w, n * t * w, t * w * w]
    else:
        time = [("NOTW²", n * o * t * w * w), ("N²O²TW", n * n * o * o * t * w), ("N²O³", n * n * o**3)]
        mem = [n * n * o * o, n * o * w, n * t * w, t * w * w]
    return time, mem


def _cnn_terms(method: Method, n: int, o: int, t: int, w: int, d: int, f: int):
    fp = t * d * f * w * w + o * w
    mem_dense = [n * n * o * o, n * o * (d * w + f * w * w + o * w), n * t * d * w, t * f * w * w + o * w * w]
    if method is Method.JACOBIAN_CONTRACTION:
        return [("NO[TDFW² + OW]", n * o * fp), ("N²O²[TFW² + OW]", n * n * o * o * (t * f * w * w + o * w))], mem_dense
    if method is Method.NTK_VECTOR_PRODUCTS:
        return [("N²O[TDFW² + OW]", n * n * o * fp)], mem_dense
    branches = [f * w * w, d * w + d * f * w * w / o, d * w + d * d * w / o + d * d * f * w / (o * o)]
    pick = int(np.argmin(branches))
    label = f"N²O²[T·min(FW², DW + DFW²/O, DW + D²W/O + D²FW/O²) + O] (branch {pick + 1})"
    time = [("NO[TDFW² + OW]", n * o * fp), (label, n * n * o * o * (t * branches[pick] + o))]
    mem = [n * n * o * o, n * o * d * w, n * d * f * w, n * t * d * w, t * f * w * w + o * w * w]
    return time, mem


def predict_table(spec: ModelSpec, method, n: int) -> CostEstimate:
    """Closed-form cost of ``method`` for a reference FCN or CNN, term by term."""
    method = Method.parse(method)
    if method is Method.AUTO:
        raise ValueError("predict_table needs a concrete method")
    t, w, o = spec.depth, spec.width, spec.output_size
    if spec.family == "fcn":
        time, mem = _fcn_terms(method, n, o, t, w)
    else:
        time, mem = _cnn_terms(method, n, o, t, w, spec.d, spec.f)
    return CostEstimate(method, sum(v for _, v in time), int(BYTES * max(mem)), time)


# ---------------------------------------------------------------------------
# validation against the counter


def validate_against_counter(prog: Program, method, n, o: int | None = None, *, seed: int = 0) -> dict:
    """Run ``method`` under the counter and compare each term with its prediction.

    Ratios outside ``[0.2, 5]`` are flagged.
    """
    method = Method.parse(method)
    n1, n2 = _batch(n)
    predicted = predict_generic(prog, method, (n1, n2), o)
    rng = np.random.default_rng(seed)
    params = init_params(prog, rng)
    x1, x2 = draw_inputs(prog, rng, n1), draw_inputs(prog, rng, n2)
    with T.counting() as counter:
        ntk(prog, params, x1, x2, method)
    per_term = []
    for label, value in predicted.breakdown:
        measured = sum(counter.by_phase.get(ph, 0) for ph in _PHASES[method][label])
        ratio = measured / value if value else (1.0 if measured == 0 else math.inf)
        per_term.append(
            {"term": label, "predicted": value, "measured": measured, "ratio": ratio, "flagged": not 0.2 <= ratio <= 5}
        )
    measured = counter.fused_multiply_adds
    total_ratio = measured / predicted.flops if predicted.flops else math.inf
    return {
        "method": method.value,
        "predicted_flops": predicted.flops,
        "measured_flops": measured,
        "ratio": total_ratio,
        "flagged": not 0.2 <= total_ratio <= 5 or any(t["flagged"] for t in per_term),
        "peak_bytes": counter.peak_live_bytes,
        "predicted_memory_bytes": predicted.memory_bytes,
        "per_term": per_term,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def spec_costs(spec: ModelSpec, n) -> dict[str, CostEstimate]:
    prog = build(spec)
    return {m.value: predict_generic(prog, m, n) for m in CONCRETE}
