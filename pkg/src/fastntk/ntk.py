"""Empirical neural tangent kernels ``Θ = J(x1) J(x2)ᵀ`` three ways.

* Jacobian contraction: reverse-mode Jacobians per parameter block,
  contracted block by block.
* NTK-vector products: one VJP per output column on the second batch,
  pushed through the first batch with a JVP.
* Structured derivatives: output cotangents of each parameter-reading node,
  combined through structured primitive Jacobians.

All three return an :class:`NtkMatrix` whose ``values`` have shape
``(n1, n2, o, o)``. The flat matrix view is batch-major, then output-major.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator

from . import tensor as T
from .autodiff import LinearProgram, identity_cotangents, linearize
from .mjjmp import mjjmp_execute
from .program import Program
from .structure import structured_jacobian
from .tensor import DimensionError

__all__ = [
    "Method",
    "NtkMatrix",
    "ntk",
    "ntk_jacobian_contraction",
    "ntk_vector_products",
    "ntk_structured_derivatives",
    "NtkOperator",
    "ntk_vector_product_operator",
    "power_iteration",
]


class Method(enum.Enum):
    JACOBIAN_CONTRACTION = "jacobian_contraction"
    NTK_VECTOR_PRODUCTS = "ntk_vector_products"
    STRUCTURED_DERIVATIVES = "structured_derivatives"
    AUTO = "auto"

    @classmethod
    def parse(cls, value) -> Method:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_").lower())
        except ValueError:
            names = ", ".join(m.value.replace("_", "-") for m in cls)
            raise ValueError(f"unknown method {value!r}; expected one of {names}") from None


CONCRETE = (Method.JACOBIAN_CONTRACTION, Method.NTK_VECTOR_PRODUCTS, Method.STRUCTURED_DERIVATIVES)


@dataclass
class NtkMatrix:
    values: np.ndarray
    method: Method | None = None

    @property
    def n1(self) -> int:
        return self.values.shape[0]

    @property
    def n2(self) -> int:
        return self.values.shape[1]

    @property
    def o(self) -> int:
        return self.values.shape[2]

    @property
    def matrix(self) -> np.ndarray:
        """``(n1·o, n2·o)`` view; row ``i·o + a`` is input ``i``, output ``a``."""
        n1, n2, o, _ = self.values.shape
        return np.transpose(self.values, (0, 2, 1, 3)).reshape(n1 * o, n2 * o)


def _sides(prog: Program, params, x1, x2) -> tuple[LinearProgram, LinearProgram]:
    with T.phase("forward"):
        lin1 = linearize(prog, params, x1)
        lin2 = lin1 if x2 is None else linearize(prog, params, x2)
    return lin1, lin2


def ntk_jacobian_contraction(prog: Program, params, x1, x2=None) -> NtkMatrix:
    """Contract per-block reverse-mode Jacobians, holding one block per side at a time."""
    lin1, lin2 = _sides(prog, params, x1, x2)
    o = lin1.output_size
    theta = np.zeros((lin1.n, lin2.n, o, o))
    with T.phase("jacobian"):
        stream1 = lin1.backward(identity_cotangents(lin1))
        stream2 = stream1 if lin2 is lin1 else lin2.backward(identity_cotangents(lin2))
    for idx, j1 in _guarded(stream1, "jacobian"):
        j2 = j1 if lin2 is lin1 else _next_block(stream2, idx)
        with T.phase("contract"):
            block = T.einsum("anP,bmP->nmab", j1.reshape(j1.shape[:2] + (-1,)), j2.reshape(j2.shape[:2] + (-1,)))
            theta = T.add(theta, block)
    return NtkMatrix(theta, Method.JACOBIAN_CONTRACTION)


def _guarded(stream, label: str):
    while True:
        with T.phase(label):
            item = next(stream, None)
        if item is None:
            return
        yield item


def _next_block(stream, idx: int) -> np.ndarray:
    with T.phase("jacobian"):
        other, block = next(stream)
    if other != idx:
        raise RuntimeError(f"parameter blocks out of step: {idx} vs {other}")
    return block


def ntk_vector_products(prog: Program, params, x1, x2=None) -> NtkMatrix:
    """One VJP per output column on the second batch, then a batched JVP on the first."""
    lin1, lin2 = _sides(prog, params, x1, x2)
    o, n1, n2 = lin1.output_size, lin1.n, lin2.n
    with T.phase("vjp"):
        cts = lin2.transpose(identity_cotangents(lin2))
    probes = [c.reshape((o * n2,) + c.shape[2:]) for c in cts]
    with T.phase("jvp"):
        out = lin1.forward([p.reshape((o * n2, 1) + p.shape[1:]) for p in probes])
    out = out.reshape(o, n2, n1, o)
    return NtkMatrix(np.ascontiguousarray(np.transpose(out, (2, 1, 3, 0))), Method.NTK_VECTOR_PRODUCTS)


def ntk_structured_derivatives(prog: Program, params, x1, x2=None, *, j_mode: str = "rule") -> NtkMatrix:
    """Sum of structured four-way products over parameters and the node pairs reading them."""
    lin1, lin2 = _sides(prog, params, x1, x2)
    o = lin1.output_size
    consumers = [lin1.consumers(i) for i in range(len(lin1.param_shapes))]
    needed = sorted({c for group in consumers for c in group})
    with T.phase("cotangents"):
        ct1 = lin1.node_cotangents(identity_cotangents(lin1), needed)
        ct2 = ct1 if lin2 is lin1 else lin2.node_cotangents(identity_cotangents(lin2), needed)
    with T.phase("extract"):
        sj1 = {i: structured_jacobian(lin1, lin1.nodes[i], j_mode) for i in needed}
        sj2 = sj1 if lin2 is lin1 else {i: structured_jacobian(lin2, lin2.nodes[i], j_mode) for i in needed}
    theta = np.zeros((lin1.n, lin2.n, o, o))
    with T.phase("mjjmp"):
        for group in consumers:
            for l1 in group:
                for l2 in group:
                    theta = T.add(theta, mjjmp_execute(ct1[l1], sj1[l1], sj2[l2], ct2[l2]))
    return NtkMatrix(theta, Method.STRUCTURED_DERIVATIVES)


_DISPATCH = {
    Method.JACOBIAN_CONTRACTION: ntk_jacobian_contraction,
    Method.NTK_VECTOR_PRODUCTS: ntk_vector_products,
    Method.STRUCTURED_DERIVATIVES: ntk_structured_derivatives,
}


def ntk(prog: Program, params, x1, x2=None, method="auto") -> NtkMatrix:
    """Θ(x1, x2); ``x2=None`` means ``x2 = x1`` and reuses the first side's work."""
    method = Method.parse(method)
    if method is Method.AUTO:
        from .cost import select_method

        n2 = len(x1) if x2 is None else len(x2)
        method = select_method(prog, (len(x1), n2), prog.output_size)
    return _DISPATCH[method](prog, params, x1, x2)


# ---------------------------------------------------------------------------
# matrix-free products


class NtkOperator:
    """``v ↦ Θ v`` without forming Θ: one batch-summed VJP, then one JVP.

    Residuals of both sides are captured once at construction.
    """

    def __init__(self, prog: Program, params, x1, x2=None):
        self.lin1, self.lin2 = _sides(prog, params, x1, x2)
        self.o = self.lin1.output_size
        self.shape = (self.lin1.n * self.o, self.lin2.n * self.o)

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.size != self.shape[1] or v.ndim > 2:
            raise DimensionError(f"vector of shape {v.shape} does not match operator columns {self.shape[1]}")
        ct = v.reshape((1, self.lin2.n) + self.lin2.out_shape)
        with T.phase("vjp"):
            tangents = self.lin2.transpose(ct, sum_batch=True)
        with T.phase("jvp"):
            out = self.lin1.forward(tangents)
        return out.reshape(self.shape[0])

    __call__ = matvec

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=self.matvec, dtype=np.float64)


def ntk_vector_product_operator(prog: Program, params, x1, x2=None) -> NtkOperator:
    return NtkOperator(prog, params, x1, x2)


def power_iteration(op, *, iters: int = 200, tol: float = 0.0, seed: int = 0) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD operator by repeated application."""
    shape = op.shape
    if shape[0] != shape[1]:
        raise DimensionError(f"power iteration needs a square operator, got {shape}")
    v = np.random.default_rng(seed).standard_normal(shape[0])
    v /= np.linalg.norm(v)
    value = 0.0
    for _ in range(iters):
        w = op.matvec(v)
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        v = w / norm
        if tol and abs(new - value) <= tol * abs(new):
            value = new
            break
        value = new
    return value, v
