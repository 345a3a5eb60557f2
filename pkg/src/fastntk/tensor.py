"""Dense float64 kernels with an instrumented multiply-add accountant.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
order. Every kernel in this module reports its cost to the active
:class:`FlopCounter` sessions (if any), in fused multiply-add units: a
``(M, K) @ (K, P)`` product costs ``M * K * P``.

Kernels accept arrays with arbitrary leading axes that broadcast against
each other; the per-example operation acts on the trailing axes. The cost of
an operation is the per-example cost times the size of the broadcast leading
shape.
"""

from __future__ import annotations

import contextlib
import math
import string
import weakref
from collections import defaultdict
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionError",
    "FlopCounter",
    "counting",
    "phase",
    "add_flops",
    "track",
    "as_tensor",
    "matmul",
    "einsum",
    "conv2d_circular",
    "conv2d_circular_transpose_input",
    "conv2d_circular_transpose_filter",
    "conv_offsets",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "relu_mask",
    "shape_ops",
    "reshape",
    "transpose",
    "broadcast_in_dim",
    "reduce_sum",
    "global_avg_pool",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


@dataclass
class FlopCounter:
    """Accumulates multiply-adds and a high-water mark of live tensor bytes.

    ``by_op`` splits the total by kernel name and ``by_phase`` by the label
    of the innermost :func:`phase` block active when the cost was incurred.
    """

    fused_multiply_adds: int = 0
    peak_live_bytes: int = 0
    live_bytes: int = 0
    by_op: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    by_phase: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def _release(self, nbytes: int) -> None:
        self.live_bytes -= nbytes


_sessions: list[FlopCounter] = []
_phases: list[str] = []


@contextlib.contextmanager
def counting() -> Iterator[FlopCounter]:
    """Open a counting session; nested sessions all receive every count."""
    counter = FlopCounter()
    _sessions.append(counter)
    try:
        yield counter
    finally:
        _sessions.remove(counter)


@contextlib.contextmanager
def phase(label: str) -> Iterator[None]:
    _phases.append(label)
    try:
        yield
    finally:
        _phases.pop()


def add_flops(count: int, op: str = "other") -> None:
    if not _sessions:
        return
    count = int(count)
    label = _phases[-1] if _phases else "unlabeled"
    for counter in _sessions:
        counter.fused_multiply_adds += count
        counter.by_op[op] += count
        counter.by_phase[label] += count


def track(arr: np.ndarray) -> np.ndarray:
    """Register a freshly produced buffer with the live-bytes accounting."""
    if _sessions and arr.flags.owndata and arr.nbytes:
        nbytes = arr.nbytes
        for counter in _sessions:
            counter.live_bytes += nbytes
            counter.peak_live_bytes = max(counter.peak_live_bytes, counter.live_bytes)
            weakref.finalize(arr, counter._release, nbytes)
    return arr


def as_tensor(x, *, allow_empty: bool = False) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not allow_empty and 0 in arr.shape:
        raise DimensionError(f"zero-extent shape {arr.shape} is not allowed")
    return arr


def _lead_size(*shapes: Sequence[int]) -> int:
    try:
        return math.prod(np.broadcast_shapes(*shapes))
    except ValueError as exc:
        raise DimensionError(f"leading axes {list(shapes)} do not broadcast") from exc


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b) -> np.ndarray:
    """Rank-2 matrix product; costs ``M * K * P``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    m, k = a.shape
    add_flops(m * k * b.shape[1], "matmul")
    return track(a @ b)


def _parse_einsum(subscripts: str, operands: Sequence[np.ndarray]):
    lhs, out = subscripts.replace(" ", "").split("->")
    terms = lhs.split(",")
    if len(terms) != len(operands):
        raise DimensionError(f"einsum {subscripts!r}: got {len(operands)} operands")
    sizes: dict[str, int] = {}
    ell_shapes = []
    for term, op in zip(terms, operands):
        if "..." in term:
            head, tail = term.split("...")
            n_ell = op.ndim - len(head) - len(tail)
            ell_shapes.append(op.shape[len(head): len(head) + n_ell])
            labels = head + tail
            dims = op.shape[: len(head)] + op.shape[len(head) + n_ell:]
        else:
            labels, dims = term, op.shape
        if len(labels) != len(dims):
            raise DimensionError(f"einsum {subscripts!r}: operand of shape {op.shape} does not match {term!r}")
        for label, dim in zip(labels, dims):
            prev = sizes.get(label)
            if prev is None or prev == 1:
                sizes[label] = dim
            elif dim != 1 and dim != prev:
                raise DimensionError(
                    f"einsum {subscripts!r}: label {label!r} has extents {prev} and {dim}"
                )
    ell = np.broadcast_shapes(*ell_shapes) if ell_shapes else ()
    return sizes, ell


def einsum(subscripts: str, *operands, op: str = "contract") -> np.ndarray:
    """Counted ``numpy.einsum`` for one or two operands.

    The cost is the product of the extents of every label taking part,
    which is ``M * K * P`` for a matrix product and the input size for a
    single-operand reduction.
    """
    operands = [as_tensor(x) for x in operands]
    if len(operands) > 2:
        raise ValueError("einsum is limited to pairwise contractions")
    sizes, ell = _parse_einsum(subscripts, operands)
    add_flops(math.prod(sizes.values()) * math.prod(ell), op)
    return track(np.ascontiguousarray(np.einsum(subscripts, *operands, optimize=len(operands) > 1)))


# ---------------------------------------------------------------------------
# circular convolution


def conv_offsets(fh: int, fw: int) -> Iterator[tuple[int, int, int, int]]:
    """Yield ``(i, j, di, dj)``: filter tap and the spatial shift it reads."""
    ph, pw = fh // 2, fw // 2
    for i in range(fh):
        for j in range(fw):
            yield i, j, i - ph, j - pw


def _shift(x: np.ndarray, di: int, dj: int) -> np.ndarray:
    # result[h, w] = x[(h + di) % H, (w + dj) % W] over axes (-3, -2)
    return np.roll(x, shift=(-di, -dj), axis=(-3, -2))


def _check_conv(x: np.ndarray, filt: np.ndarray) -> None:
    if x.ndim < 3 or filt.ndim < 4:
        raise DimensionError(f"conv2d_circular: bad ranks {x.shape} and {filt.shape}")
    if x.shape[-1] != filt.shape[-2]:
        raise DimensionError(
            f"conv2d_circular: input channels {x.shape[-1]} != filter input channels {filt.shape[-2]}"
        )


def conv2d_circular(x, filt) -> np.ndarray:
    """Unit-stride cross-correlation with wraparound indexing.

    ``x`` is ``(..., H, W, C_in)`` and ``filt`` is ``(..., FH, FW, C_in, C_out)``;
    the output keeps the spatial size. Tap ``(i, j)`` reads pixel
    ``(h + i - FH // 2, w + j - FW // 2)`` modulo the image size.
    """
    x, filt = as_tensor(x), as_tensor(filt)
    _check_conv(x, filt)
    h, w, cin = x.shape[-3:]
    fh, fw, _, cout = filt.shape[-4:]
    lead = _lead_size(x.shape[:-3], filt.shape[:-4])
    add_flops(lead * h * w * fh * fw * cin * cout, "conv")
    out = None
    for i, j, di, dj in conv_offsets(fh, fw):
        term = np.einsum("...hwc,...co->...hwo", _shift(x, di, dj), filt[..., i, j, :, :])
        out = term if out is None else out + term
    return track(np.ascontiguousarray(out))


def conv2d_circular_transpose_input(ct, filt) -> np.ndarray:
    """Adjoint of :func:`conv2d_circular` with respect to its input."""
    ct, filt = as_tensor(ct), as_tensor(filt)
    h, w, cout = ct.shape[-3:]
    fh, fw, cin, _ = filt.shape[-4:]
    if filt.shape[-1] != cout:
        raise DimensionError(f"conv transpose: {ct.shape} vs filter {filt.shape}")
    lead = _lead_size(ct.shape[:-3], filt.shape[:-4])
    add_flops(lead * h * w * fh * fw * cin * cout, "conv")
    out = None
    for i, j, di, dj in conv_offsets(fh, fw):
        term = np.einsum("...hwo,...co->...hwc", _shift(ct, -di, -dj), filt[..., i, j, :, :])
        out = term if out is None else out + term
    return track(np.ascontiguousarray(out))


def conv2d_circular_transpose_filter(x, ct, filter_hw: tuple[int, int], *, lead_out: str = "...") -> np.ndarray:
    """Adjoint of :func:`conv2d_circular` with respect to its filter.

    ``lead_out`` is an einsum fragment naming which leading axes survive;
    the default keeps all of them. Passing e.g. ``"K"`` with two leading
    axes labelled ``KN`` sums over the second.
    """
    x, ct = as_tensor(x), as_tensor(ct)
    fh, fw = filter_hw
    h, w, cin = x.shape[-3:]
    cout = ct.shape[-1]
    if ct.shape[-3:-1] != (h, w):
        raise DimensionError(f"conv transpose: {x.shape} vs cotangent {ct.shape}")
    lead = _lead_size(x.shape[:-3], ct.shape[:-3])
    add_flops(lead * h * w * fh * fw * cin * cout, "conv")
    if lead_out == "...":
        spec = "...hwc,...hwo->...co"
    else:
        spec = f"KNhwc,KNhwo->{lead_out}co"
    taps = [np.einsum(spec, _shift(x, di, dj), ct) for _, _, di, dj in conv_offsets(fh, fw)]
    out = np.stack(taps, axis=-3)
    return track(out.reshape(out.shape[:-3] + (fh, fw, cin, cout)))


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {list(shapes)}") from exc


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    add_flops(math.prod(shape), "add")
    return track(a + b)


def sub(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    add_flops(math.prod(shape), "sub")
    return track(a - b)


def mul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    add_flops(math.prod(shape), "mul")
    return track(a * b)


def scale(a, s: float) -> np.ndarray:
    a = as_tensor(a)
    add_flops(a.size, "scale")
    return track(a * float(s))


def relu(a, *, return_mask: bool = False):
    """Rectifier; with ``return_mask`` also the 0/1 positivity indicator (same cost)."""
    a = as_tensor(a)
    add_flops(a.size, "relu")
    mask = (a > 0).astype(np.float64)
    out = track(a * mask)
    if return_mask:
        return out, track(mask)
    return out


def relu_mask(a) -> np.ndarray:
    a = as_tensor(a)
    add_flops(a.size, "relu")
    return track((a > 0).astype(np.float64))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu, "relu_mask": relu_mask}


def elementwise(op_kind: str, *args) -> np.ndarray:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# data movement and reductions


def reshape(a, shape: Sequence[int]) -> np.ndarray:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return track(a.reshape(shape).copy())


def transpose(a, perm: Sequence[int]) -> np.ndarray:
    a = as_tensor(a)
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {perm} is not a permutation of {a.ndim} axes")
    return track(np.ascontiguousarray(np.transpose(a, perm)))


def broadcast_in_dim(a, shape: Sequence[int], broadcast_dimensions: Sequence[int]) -> np.ndarray:
    """Operand axis ``i`` maps to output axis ``broadcast_dimensions[i]``."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    dims = tuple(int(d) for d in broadcast_dimensions)
    if len(dims) != a.ndim or any(d < 0 or d >= len(shape) for d in dims) or list(dims) != sorted(set(dims)):
        raise DimensionError(f"broadcast_in_dim: bad dimensions {dims} for {a.shape} -> {shape}")
    expanded = [1] * len(shape)
    for axis, d in enumerate(dims):
        if a.shape[axis] not in (1, shape[d]):
            raise DimensionError(f"broadcast_in_dim: cannot broadcast {a.shape} to {shape} along {dims}")
        expanded[d] = a.shape[axis]
    return track(np.ascontiguousarray(np.broadcast_to(a.reshape(expanded), shape)))


def reduce_sum(a, axes: Sequence[int]) -> np.ndarray:
    a = as_tensor(a)
    axes = tuple(int(x) % a.ndim for x in axes) if a.ndim else ()
    if len(set(axes)) != len(axes):
        raise DimensionError(f"reduce_sum: repeated axes {axes}")
    add_flops(a.size, "reduce_sum")
    return track(np.ascontiguousarray(a.sum(axis=axes)))


def global_avg_pool(a) -> np.ndarray:
    """Mean over the two spatial axes of ``(..., H, W, C)``."""
    a = as_tensor(a)
    if a.ndim < 3:
        raise DimensionError(f"global_avg_pool expects (..., H, W, C), got {a.shape}")
    add_flops(a.size, "global_avg_pool")
    return track(np.ascontiguousarray(a.mean(axis=(-3, -2))))


_SHAPE_OPS = {
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_in_dim": broadcast_in_dim,
    "reduce_sum": reduce_sum,
    "global_avg_pool": global_avg_pool,
}


def shape_ops(op_kind: str, arg, *attrs) -> np.ndarray:
    try:
        fn = _SHAPE_OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown shape op {op_kind!r}") from None
    return fn(arg, *attrs)


LOWER = string.ascii_lowercase
