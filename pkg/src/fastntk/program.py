"""Computation graphs over a small primitive set, and the two reference nets.

A :class:`Program` is a topologically ordered list of :class:`Node` objects.
Node shapes are per-example; at run time every value carries two extra
leading axes ``(K, N)``: ``K`` indexes simultaneous probes (tangents or
cotangents) and ``N`` the batch. Parameters enter with leading ``(1, 1)``
and inputs with ``(1, n)``, so the same interpreter serves the primal,
forward-mode and reverse-mode sweeps.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import DimensionError

__all__ = [
    "Kind",
    "Ref",
    "Node",
    "Program",
    "ProgramBuilder",
    "SpecError",
    "ModelSpec",
    "build_fcn",
    "build_cnn",
    "build",
    "evaluate",
    "apply_node",
    "init_params",
    "draw_inputs",
    "matmul_subscripts",
]

LEAD = 2


class SpecError(ValueError):
    """Invalid model description."""


class Kind(enum.Enum):
    MATMUL = "MatMul"
    CONV = "Conv2dCircular"
    ADD = "Add"
    SUB = "Sub"
    MUL = "Mul"
    SCALE = "Scale"
    RELU = "Relu"
    RESHAPE = "Reshape"
    TRANSPOSE = "Transpose"
    BROADCAST = "BroadcastInDim"
    REDUCE_SUM = "ReduceSum"
    GAP = "GlobalAvgPool"

    @property
    def is_linear(self) -> bool:
        return self is not Kind.RELU


@dataclass(frozen=True)
class Ref:
    """Where a node input comes from: ``node``, ``param``, ``input`` or ``const``."""

    source: str
    index: int = 0

    def __post_init__(self):
        if self.source not in ("node", "param", "input", "const"):
            raise ValueError(f"unknown ref source {self.source!r}")


@dataclass(frozen=True)
class Node:
    id: int
    kind: Kind
    inputs: tuple[Ref, ...]
    attrs: tuple[tuple[str, Any], ...]
    shape: tuple[int, ...]

    def attr(self, name: str, default=None):
        return dict(self.attrs).get(name, default)

    @property
    def param_slot(self) -> int | None:
        """Position of the parameter input, if any."""
        for pos, ref in enumerate(self.inputs):
            if ref.source == "param":
                return pos
        return None

    @property
    def param_index(self) -> int | None:
        pos = self.param_slot
        return None if pos is None else self.inputs[pos].index


@dataclass(frozen=True)
class Program:
    nodes: tuple[Node, ...]
    param_shapes: tuple[tuple[int, ...], ...]
    input_shape: tuple[int, ...]
    output: Ref
    consts: tuple[np.ndarray, ...] = ()
    fan_ins: tuple[int, ...] = ()
    spec: ModelSpec | None = None

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shape_of(self.output)

    @property
    def output_size(self) -> int:
        return math.prod(self.output_shape)

    def shape_of(self, ref: Ref) -> tuple[int, ...]:
        if ref.source == "node":
            return self.nodes[ref.index].shape
        if ref.source == "param":
            return self.param_shapes[ref.index]
        if ref.source == "input":
            return self.input_shape
        return self.consts[ref.index].shape

    def consumers(self, param: int) -> list[int]:
        """Ids of nodes reading parameter ``param``, in program order."""
        return [node.id for node in self.nodes if node.param_index == param]


# ---------------------------------------------------------------------------
# per-node semantics


def matmul_subscripts(ranks: tuple[int, int]) -> str:
    """Per-example einsum for a MatMul node whose operands have these ranks."""
    table = {(2, 1): "mk,k->m", (2, 2): "mk,kp->mp", (1, 2): "k,kp->p", (1, 1): "k,k->"}
    try:
        return table[ranks]
    except KeyError:
        raise DimensionError(f"MatMul does not support operand ranks {ranks}") from None


def lead_subscripts(sub: str) -> str:
    """Prefix every term of a per-example einsum with the two lead labels."""
    lhs, out = sub.split("->")
    return ",".join("KN" + t for t in lhs.split(",")) + "->KN" + out


def align(value: np.ndarray, rank: int) -> np.ndarray:
    """Insert singleton per-example axes so trailing broadcasting ignores the lead."""
    own = value.ndim - LEAD
    if own >= rank:
        return value
    return value.reshape(value.shape[:LEAD] + (1,) * (rank - own) + value.shape[LEAD:])


def _broadcast_binary(a: np.ndarray, b: np.ndarray, shape: tuple[int, ...]):
    return align(a, len(shape)), align(b, len(shape))


def _lead_axes(values) -> tuple[int, int]:
    k = max(v.shape[0] for v in values)
    n = max(v.shape[1] for v in values)
    return k, n


def apply_node(node: Node, args: list[np.ndarray], *, with_mask: bool = False):
    """Evaluate one primitive on lead-form operands.

    With ``with_mask`` a Relu node returns ``(value, mask)``.
    """
    kind = node.kind
    if kind is Kind.MATMUL:
        return T.einsum(lead_subscripts(node.attr("subscripts")), *args, op="matmul")
    if kind is Kind.CONV:
        return T.conv2d_circular(*args)
    if kind in (Kind.ADD, Kind.SUB, Kind.MUL):
        a, b = _broadcast_binary(args[0], args[1], node.shape)
        return {Kind.ADD: T.add, Kind.SUB: T.sub, Kind.MUL: T.mul}[kind](a, b)
    if kind is Kind.SCALE:
        return T.scale(args[0], node.attr("scale"))
    if kind is Kind.RELU:
        return T.relu(args[0], return_mask=with_mask)
    (x,) = args
    lead = x.shape[:LEAD]
    if kind is Kind.RESHAPE:
        return T.reshape(x, lead + node.shape)
    if kind is Kind.TRANSPOSE:
        perm = (0, 1) + tuple(p + LEAD for p in node.attr("perm"))
        return T.transpose(x, perm)
    if kind is Kind.BROADCAST:
        dims = (0, 1) + tuple(d + LEAD for d in node.attr("dims"))
        return T.broadcast_in_dim(x, lead + node.shape, dims)
    if kind is Kind.REDUCE_SUM:
        return T.reduce_sum(x, [a + LEAD for a in node.attr("axes")])
    if kind is Kind.GAP:
        return T.global_avg_pool(x)
    raise ValueError(f"unhandled primitive {kind}")


# ---------------------------------------------------------------------------
# construction


def _infer_shape(kind: Kind, shapes: list[tuple[int, ...]], attrs: dict) -> tuple[int, ...]:
    if kind is Kind.MATMUL:
        a, b = shapes
        sub = matmul_subscripts((len(a), len(b)))
        attrs["subscripts"] = sub
        if a[-1] != b[0]:
            raise DimensionError(f"MatMul: cannot contract {a} with {b}")
        return tuple(a[:-1]) + tuple(b[1:])
    if kind is Kind.CONV:
        x, f = shapes
        if len(x) != 3 or len(f) != 4 or x[2] != f[2]:
            raise DimensionError(f"Conv2dCircular: input {x} and filter {f} do not conform")
        return (x[0], x[1], f[3])
    if kind in (Kind.ADD, Kind.SUB, Kind.MUL):
        try:
            return tuple(np.broadcast_shapes(*shapes))
        except ValueError:
            raise DimensionError(f"{kind.value}: shapes {shapes} do not broadcast") from None
    (x,) = shapes
    if kind in (Kind.SCALE, Kind.RELU):
        return x
    if kind is Kind.RESHAPE:
        shape = tuple(int(s) for s in attrs["shape"])
        if math.prod(shape) != math.prod(x):
            raise DimensionError(f"Reshape: {x} -> {shape}")
        attrs["shape"] = shape
        return shape
    if kind is Kind.TRANSPOSE:
        perm = tuple(int(p) for p in attrs["perm"])
        if sorted(perm) != list(range(len(x))):
            raise DimensionError(f"Transpose: bad permutation {perm} for {x}")
        attrs["perm"] = perm
        return tuple(x[p] for p in perm)
    if kind is Kind.BROADCAST:
        shape = tuple(int(s) for s in attrs["shape"])
        dims = tuple(int(d) for d in attrs["dims"])
        if len(dims) != len(x) or list(dims) != sorted(set(dims)) or any(
            d >= len(shape) or x[i] not in (1, shape[d]) for i, d in enumerate(dims)
        ):
            raise DimensionError(f"BroadcastInDim: cannot map {x} into {shape} along {dims}")
        attrs["shape"], attrs["dims"] = shape, dims
        return shape
    if kind is Kind.REDUCE_SUM:
        axes = tuple(sorted(int(a) % len(x) for a in attrs["axes"]))
        attrs["axes"] = axes
        return tuple(s for i, s in enumerate(x) if i not in axes)
    if kind is Kind.GAP:
        if len(x) != 3:
            raise DimensionError(f"GlobalAvgPool expects (H, W, C), got {x}")
        return (x[2],)
    raise ValueError(f"unhandled primitive {kind}")


@dataclass
class ProgramBuilder:
    """Incrementally assembles a :class:`Program` with shape inference."""

    input_shape: tuple[int, ...]
    nodes: list[Node] = field(default_factory=list)
    param_shapes: list[tuple[int, ...]] = field(default_factory=list)
    fan_ins: list[int] = field(default_factory=list)
    consts: list[np.ndarray] = field(default_factory=list)

    def input(self) -> Ref:
        return Ref("input")

    def param(self, shape, fan_in: int | None = None) -> Ref:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise SpecError(f"parameter shape {shape} has a non-positive extent")
        self.param_shapes.append(shape)
        self.fan_ins.append(int(fan_in) if fan_in else (shape[-1] if shape else 1))
        return Ref("param", len(self.param_shapes) - 1)

    def const(self, value) -> Ref:
        self.consts.append(T.as_tensor(value))
        return Ref("const", len(self.consts) - 1)

    def shape_of(self, ref: Ref) -> tuple[int, ...]:
        if ref.source == "node":
            return self.nodes[ref.index].shape
        if ref.source == "param":
            return self.param_shapes[ref.index]
        if ref.source == "input":
            return tuple(self.input_shape)
        return self.consts[ref.index].shape

    def add(self, kind: Kind, *inputs: Ref, **attrs) -> Ref:
        if sum(r.source == "param" for r in inputs) > 1:
            raise SpecError(f"{kind.value}: a node may read at most one parameter")
        for r in inputs:
            if r.source == "node" and not 0 <= r.index < len(self.nodes):
                raise SpecError(f"{kind.value}: reference to unknown node {r.index}")
        shape = _infer_shape(kind, [self.shape_of(r) for r in inputs], attrs)
        node = Node(len(self.nodes), kind, tuple(inputs), tuple(sorted(attrs.items())), shape)
        self.nodes.append(node)
        return Ref("node", node.id)

    def build(self, output: Ref, spec: ModelSpec | None = None) -> Program:
        return Program(
            nodes=tuple(self.nodes),
            param_shapes=tuple(self.param_shapes),
            input_shape=tuple(self.input_shape),
            output=output,
            consts=tuple(self.consts),
            fan_ins=tuple(self.fan_ins),
            spec=spec,
        )


# ---------------------------------------------------------------------------
# model specs


def _extent2(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise SpecError(f"expected an int or [height, width], got {value!r}")
        return int(value[0]), int(value[1])
    value = int(value)
    root = math.isqrt(value) if value > 0 else 0
    return (root, root) if root * root == value else (1, value)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a reference FCN or CNN.

    ``pixels`` and ``filter`` accept an int (a perfect square is read as a
    square image, anything else as a single row) or an explicit pair.
    """

    family: str
    depth: int
    width: int
    output_size: int
    input_dim: int | None = None
    pixels: Any = None
    filter: Any = None
    nonlinearity: str = "relu"
    bias: bool = False
    input_channels: int | None = None

    def __post_init__(self):
        if self.family not in ("fcn", "cnn"):
            raise SpecError(f"family must be 'fcn' or 'cnn', got {self.family!r}")
        if self.nonlinearity not in ("relu", "identity"):
            raise SpecError(f"nonlinearity must be 'relu' or 'identity', got {self.nonlinearity!r}")
        if self.depth < 0:
            raise SpecError(f"depth must be >= 0, got {self.depth}")
        for name in ("width", "output_size"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("input_dim", "input_channels"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise SpecError(f"{name} must be >= 1, got {value}")
        if self.family == "cnn":
            for name in ("pixels", "filter"):
                if getattr(self, name) is None:
                    raise SpecError(f"cnn spec requires {name!r}")
                if min(_extent2(getattr(self, name))) < 1:
                    raise SpecError(f"{name} must be positive, got {getattr(self, name)!r}")

    @property
    def d_in(self) -> int:
        return self.input_dim if self.input_dim is not None else self.width

    @property
    def channels_in(self) -> int:
        return self.input_channels if self.input_channels is not None else self.width

    @property
    def pixel_hw(self) -> tuple[int, int]:
        return _extent2(self.pixels) if self.family == "cnn" else (1, 1)

    @property
    def filter_hw(self) -> tuple[int, int]:
        return _extent2(self.filter) if self.family == "cnn" else (1, 1)

    @property
    def d(self) -> int:
        return math.prod(self.pixel_hw)

    @property
    def f(self) -> int:
        return math.prod(self.filter_hw)

    @classmethod
    def from_dict(cls, data: dict) -> ModelSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown model spec keys: {sorted(unknown)}")
        missing = {"family", "depth", "width", "output_size"} - set(data)
        if missing:
            raise SpecError(f"missing model spec keys: {sorted(missing)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise SpecError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"model spec is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise SpecError("model spec must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_fcn(spec: ModelSpec) -> Program:
    """Alternating dense layers and nonlinearities, read out by a dense layer."""
    if spec.family != "fcn":
        raise SpecError(f"build_fcn needs family 'fcn', got {spec.family!r}")
    b = ProgramBuilder((spec.d_in,))
    h, fan = b.input(), spec.d_in
    for _ in range(spec.depth):
        h = b.add(Kind.MATMUL, b.param((spec.width, fan), fan), h)
        if spec.bias:
            h = b.add(Kind.ADD, h, b.param((spec.width,), 1))
        if spec.nonlinearity == "relu":
            h = b.add(Kind.RELU, h)
        fan = spec.width
    h = b.add(Kind.MATMUL, b.param((spec.output_size, fan), fan), h)
    if spec.bias:
        h = b.add(Kind.ADD, h, b.param((spec.output_size,), 1))
    return b.build(h, spec)


def build_cnn(spec: ModelSpec) -> Program:
    """Circular convolutions and nonlinearities, global average pooling, dense readout."""
    if spec.family != "cnn":
        raise SpecError(f"build_cnn needs family 'cnn', got {spec.family!r}")
    (ph, pw), (fh, fw) = spec.pixel_hw, spec.filter_hw
    b = ProgramBuilder((ph, pw, spec.channels_in))
    h, cin = b.input(), spec.channels_in
    for _ in range(spec.depth):
        h = b.add(Kind.CONV, h, b.param((fh, fw, cin, spec.width), fh * fw * cin))
        if spec.bias:
            h = b.add(Kind.ADD, h, b.param((spec.width,), 1))
        if spec.nonlinearity == "relu":
            h = b.add(Kind.RELU, h)
        cin = spec.width
    h = b.add(Kind.GAP, h)
    h = b.add(Kind.MATMUL, b.param((spec.output_size, cin), cin), h)
    if spec.bias:
        h = b.add(Kind.ADD, h, b.param((spec.output_size,), 1))
    return b.build(h, spec)


def build(spec: ModelSpec) -> Program:
    return build_fcn(spec) if spec.family == "fcn" else build_cnn(spec)


# ---------------------------------------------------------------------------
# evaluation


def lift_params(prog: Program, params) -> list[np.ndarray]:
    if len(params) != len(prog.param_shapes):
        raise DimensionError(f"expected {len(prog.param_shapes)} parameter arrays, got {len(params)}")
    out = []
    for i, (p, shape) in enumerate(zip(params, prog.param_shapes)):
        p = T.as_tensor(p)
        if p.shape != shape:
            raise DimensionError(f"parameter {i} has shape {p.shape}, expected {shape}")
        out.append(p.reshape((1, 1) + shape))
    return out


def lift_inputs(prog: Program, x) -> np.ndarray:
    x = T.as_tensor(x)
    if x.shape[1:] != prog.input_shape:
        raise DimensionError(f"inputs have shape {x.shape}, expected (n, *{prog.input_shape})")
    return x.reshape((1,) + x.shape)


def resolve(ref: Ref, values: list, params: list, x: np.ndarray, consts: tuple) -> np.ndarray:
    if ref.source == "node":
        return values[ref.index]
    if ref.source == "param":
        return params[ref.index]
    if ref.source == "input":
        return x
    return consts[ref.index].reshape((1, 1) + consts[ref.index].shape)


def run(prog: Program, params: list[np.ndarray], x: np.ndarray, *, with_masks: bool = False):
    """Primal sweep on lifted operands; returns ``(node values, relu masks)``."""
    values: list = []
    masks: dict[int, np.ndarray] = {}
    for node in prog.nodes:
        args = [resolve(r, values, params, x, prog.consts) for r in node.inputs]
        try:
            if node.kind is Kind.RELU and with_masks:
                out, masks[node.id] = apply_node(node, args, with_mask=True)
            else:
                out = apply_node(node, args)
        except DimensionError as exc:
            raise DimensionError(f"node {node.id} ({node.kind.value}): {exc}") from exc
        values.append(out)
    return values, masks


def evaluate(prog: Program, params, x) -> np.ndarray:
    """Outputs for a batch ``x`` of shape ``(n, *input_shape)`` as an ``(n, o)`` array."""
    lp, lx = lift_params(prog, params), lift_inputs(prog, x)
    values, _ = run(prog, lp, lx)
    out = resolve(prog.output, values, lp, lx, prog.consts)
    n = lx.shape[1]
    out = np.broadcast_to(out, (1, n) + out.shape[LEAD:])
    return out.reshape(n, prog.output_size)


def init_params(prog: Program, rng: np.random.Generator) -> list[np.ndarray]:
    """i.i.d. Gaussian entries scaled by ``1 / sqrt(fan_in)``."""
    return [rng.standard_normal(s) / math.sqrt(fan) for s, fan in zip(prog.param_shapes, prog.fan_ins)]


def draw_inputs(prog: Program, rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 1:
        raise SpecError(f"batch size must be >= 1, got {n}")
    return rng.standard_normal((n,) + prog.input_shape)
