import numpy as np
import pytest

from fastntk.program import ModelSpec, ProgramBuilder, build, draw_inputs, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale else 0.0


def small_program(make, in_shape):
    """Program built by ``make(builder)`` on inputs of shape ``in_shape``."""
    b = ProgramBuilder(tuple(in_shape))
    return b.build(make(b))


def model(family="fcn", depth=2, width=8, out=3, **kw):
    if family == "fcn":
        kw.setdefault("input_dim", 3)
    return ModelSpec(family, depth, width, out, **kw)


def setup(spec, n1=2, n2=3, seed=0):
    prog = build(spec)
    rng = np.random.default_rng(seed)
    params = init_params(prog, rng)
    return prog, params, draw_inputs(prog, rng, n1), draw_inputs(prog, rng, n2)


def _k():
    from fastntk.program import Kind

    return Kind


# (label, builder, input shape) for one parameter-reading primitive each
PRIMITIVES = [
    ("matmul_weight", lambda b: b.add(_k().MATMUL, b.param((3, 4)), b.input()), (4,)),
    ("matmul_right", lambda b: b.add(_k().MATMUL, b.input(), b.param((4, 3))), (2, 4)),
    ("matmul_matrix_input", lambda b: b.add(_k().MATMUL, b.param((3, 4)), b.input()), (4, 5)),
    ("matmul_vector_param", lambda b: b.add(_k().MATMUL, b.input(), b.param((4,))), (4,)),
    ("conv_filter", lambda b: b.add(_k().CONV, b.input(), b.param((2, 3, 2, 3))), (4, 5, 2)),
    (
        "conv_input",
        lambda b: b.add(_k().CONV, b.param((4, 5, 2)), b.add(_k().SCALE, b.input(), scale=2.0)),
        (2, 3, 2, 3),
    ),
    ("mul_same", lambda b: b.add(_k().MUL, b.input(), b.param((3, 4))), (3, 4)),
    ("mul_row", lambda b: b.add(_k().MUL, b.input(), b.param((1, 4))), (3, 4)),
    ("mul_param_wider", lambda b: b.add(_k().MUL, b.input(), b.param((3, 4))), (4,)),
    ("mul_outer", lambda b: b.add(_k().MUL, b.param((3, 1)), b.input()), (1, 4)),
    ("add_bias", lambda b: b.add(_k().ADD, b.input(), b.param((4,))), (3, 4)),
    ("sub_bias", lambda b: b.add(_k().SUB, b.input(), b.param((1, 4))), (3, 4)),
    ("sub_param_first", lambda b: b.add(_k().SUB, b.param((3, 4)), b.input()), (3, 4)),
    ("scale", lambda b: b.add(_k().SCALE, b.param((3, 4)), scale=-1.5), (1,)),
    ("reshape", lambda b: b.add(_k().RESHAPE, b.param((3, 4)), shape=(2, 6)), (1,)),
    ("transpose", lambda b: b.add(_k().TRANSPOSE, b.param((2, 3, 4)), perm=(2, 0, 1)), (1,)),
    ("broadcast", lambda b: b.add(_k().BROADCAST, b.param((3, 1)), shape=(2, 3, 4), dims=(1, 2)), (1,)),
    ("reduce_sum", lambda b: b.add(_k().REDUCE_SUM, b.param((2, 3, 4)), axes=(0, 2)), (1,)),
    ("global_avg_pool", lambda b: b.add(_k().GAP, b.param((2, 3, 4))), (1,)),
    ("relu_after_matmul", lambda b: b.add(_k().RELU, b.add(_k().MATMUL, b.param((3, 4)), b.input())), (4,)),
]
PRIMITIVE_IDS = [p[0] for p in PRIMITIVES]


def random_primitive(label, rng):
    """Builder and input shape for primitive ``label`` at random extents."""
    K = _k()
    d = lambda: int(rng.integers(1, 5))  # noqa: E731
    a, b, c = d(), d(), d()
    if label == "matmul_weight":
        in_shape = (b,) if rng.random() < 0.5 else (b, c)
        return (lambda bl: bl.add(K.MATMUL, bl.param((a, b)), bl.input())), in_shape
    if label == "matmul_right":
        return (lambda bl: bl.add(K.MATMUL, bl.input(), bl.param((b, a)))), (c, b)
    if label == "matmul_vector":
        return (lambda bl: bl.add(K.MATMUL, bl.input(), bl.param((b,)))), (b,)
    if label == "conv_filter":
        h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        fh, fw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        return (lambda bl: bl.add(K.CONV, bl.input(), bl.param((fh, fw, a, b)))), (h, w, a)
    if label == "mul_same":
        return (lambda bl: bl.add(K.MUL, bl.input(), bl.param((a, b)))), (a, b)
    if label == "mul_row":
        return (lambda bl: bl.add(K.MUL, bl.input(), bl.param((1, b)))), (a, b)
    if label == "mul_outer":
        return (lambda bl: bl.add(K.MUL, bl.param((a, 1)), bl.input())), (1, b)
    if label == "mul_param_wider":
        return (lambda bl: bl.add(K.MUL, bl.input(), bl.param((a, b)))), (b,)
    if label in ("add_bias", "sub_bias"):
        kind = K.ADD if label == "add_bias" else K.SUB
        return (lambda bl: bl.add(kind, bl.input(), bl.param((b,)))), (a, b)
    if label == "sub_param_first":
        return (lambda bl: bl.add(K.SUB, bl.param((a, b)), bl.input())), (1, b)
    if label == "scale":
        s = float(rng.standard_normal())
        return (lambda bl: bl.add(K.SCALE, bl.param((a, b)), scale=s)), (1,)
    if label == "reshape":
        return (lambda bl: bl.add(K.RESHAPE, bl.param((a, b, c)), shape=(a * b, c))), (1,)
    if label == "transpose":
        perm = tuple(int(v) for v in rng.permutation(3))
        return (lambda bl: bl.add(K.TRANSPOSE, bl.param((a, b, c)), perm=perm)), (1,)
    if label == "broadcast":
        return (lambda bl: bl.add(K.BROADCAST, bl.param((a, 1)), shape=(c, a, b), dims=(1, 2))), (1,)
    if label == "reduce_sum":
        axes = tuple(sorted(int(v) for v in rng.choice(3, size=int(rng.integers(1, 3)), replace=False)))
        return (lambda bl: bl.add(K.REDUCE_SUM, bl.param((a, b, c)), axes=axes)), (1,)
    if label == "global_avg_pool":
        return (lambda bl: bl.add(K.GAP, bl.param((a, b, c)))), (1,)
    raise KeyError(label)


RANDOM_PRIMITIVES = [
    "matmul_weight", "matmul_right", "matmul_vector", "conv_filter", "mul_same", "mul_row", "mul_outer",
    "mul_param_wider", "add_bias", "sub_bias", "sub_param_first", "scale", "reshape", "transpose",
    "broadcast", "reduce_sum", "global_avg_pool",
]  # fmt: skip
