import numpy as np
import pytest

from fastntk import tensor as T
from fastntk.autodiff import (
    UnsupportedPrimitiveError,
    flatten_params,
    jacobian,
    jvp,
    linearize,
    unflatten_params,
    vjp,
    vjp_sum,
)
from fastntk.program import Kind, ProgramBuilder, build, evaluate, init_params

from conftest import PRIMITIVE_IDS, PRIMITIVES, model, rel_err, small_program


def _random(prog, rng, n=2):
    params = init_params(prog, rng)
    x = rng.standard_normal((n,) + prog.input_shape)
    tangents = [rng.standard_normal(s) for s in prog.param_shapes]
    return params, x, tangents


def test_linear_map_jvp_exact(rng):
    a = rng.standard_normal((3, 4))
    prog = small_program(lambda b: b.add(Kind.MATMUL, b.const(a), b.add(Kind.MATMUL, b.param((4, 1)), b.input())), (1,))
    params = [rng.standard_normal((4, 1))]
    t = [rng.standard_normal((4, 1))]
    x = np.ones((1, 1))
    assert np.allclose(jvp(prog, params, x, t)[0], a @ t[0][:, 0], atol=1e-14)


def test_zero_tangent_gives_zero(rng):
    prog = build(model(depth=3))
    params, x, _ = _random(prog, rng)
    assert not jvp(prog, params, x, [np.zeros(s) for s in prog.param_shapes]).any()


@pytest.mark.parametrize("eps", [1e-4, 1e-5])
def test_jvp_matches_central_differences(rng, eps):
    prog = build(model(depth=3, width=6, out=3))
    params, x, t = _random(prog, rng)
    plus = evaluate(prog, [p + eps * d for p, d in zip(params, t)], x)
    minus = evaluate(prog, [p - eps * d for p, d in zip(params, t)], x)
    assert np.abs((plus - minus) / (2 * eps) - jvp(prog, params, x, t)).max() <= 1e-6


def test_forward_difference_error_is_first_order(rng):
    prog = build(model(depth=3, width=6, out=3, nonlinearity="identity", bias=True))
    params = init_params(prog, rng)
    x = rng.standard_normal((2, 3))
    t = [rng.standard_normal(s) for s in prog.param_shapes]
    exact = jvp(prog, params, x, t)
    base = evaluate(prog, params, x)
    errs = [
        np.abs((evaluate(prog, [p + e * d for p, d in zip(params, t)], x) - base) / e - exact).max()
        for e in (1e-4, 1e-5)
    ]
    assert 5 <= errs[0] / errs[1] <= 20


@pytest.mark.parametrize("label,make,in_shape", PRIMITIVES, ids=PRIMITIVE_IDS)
def test_duality_per_primitive(rng, label, make, in_shape):
    prog = small_program(make, in_shape)
    for _ in range(20):
        params, x, u = _random(prog, rng, n=3)
        v = rng.standard_normal((3, prog.output_size))
        lhs = np.vdot(v, jvp(prog, params, x, u))
        rhs = sum(np.vdot(c.sum(axis=0), d) for c, d in zip(vjp(prog, params, x, v), u))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("spec", [model(depth=3, bias=True), model("cnn", 2, 3, 2, pixels=9, filter=3, bias=True)])
def test_duality_whole_program(rng, spec):
    prog = build(spec)
    params, x, u = _random(prog, rng, n=2)
    v = rng.standard_normal((2, prog.output_size))
    lhs = np.vdot(v, jvp(prog, params, x, u))
    rhs = sum(np.vdot(c, d) for c, d in zip(vjp_sum(prog, params, x, v), u))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_vjp_of_identity_and_linear_form(rng):
    ident = small_program(lambda b: b.param((4,)), (1,))
    v = rng.standard_normal((1, 4))
    assert np.allclose(vjp(ident, [np.zeros(4)], np.ones((1, 1)), v)[0][0], v[0])
    dot = small_program(lambda b: b.add(Kind.MATMUL, b.input(), b.param((3,))), (3,))
    x = rng.standard_normal((1, 3))
    g = vjp_sum(dot, [np.zeros(3)], x, np.ones((1, 1)))
    assert np.allclose(g[0], x[0])


def test_jacobian_of_doubling():
    prog = small_program(lambda b: b.add(Kind.SCALE, b.param((3,)), scale=2.0), (1,))
    j = jacobian(prog, [np.ones(3)], np.ones((1, 1)))
    assert np.array_equal(j[0], 2 * np.eye(3))


def test_jacobian_matrix_vector_kronecker():
    prog = small_program(lambda b: b.add(Kind.MATMUL, b.param((2, 2)), b.input()), (2,))
    j = jacobian(prog, [np.ones((2, 2))], np.array([[1.0, 2.0]]))
    assert np.array_equal(j[0], [[1, 2, 0, 0], [0, 0, 1, 2]])


def test_forward_and_reverse_jacobians_agree(rng):
    prog = build(model(depth=2, width=8, out=4))
    params = init_params(prog, rng)
    x = rng.standard_normal((3, 3))
    fwd, rev = jacobian(prog, params, x, "forward"), jacobian(prog, params, x, "reverse")
    assert np.abs(fwd - rev).max() <= 1e-11


def test_linearize_replaces_relu_with_mask(rng):
    prog = small_program(lambda b: b.add(Kind.RELU, b.add(Kind.MATMUL, b.param((2, 1)), b.input())), (1,))
    lin = linearize(prog, [np.array([[-1.0], [2.0]])], np.ones((1, 1)))
    assert all(n.kind is not Kind.RELU for n in lin.nodes)
    masks = [c for c in lin.consts if c.size == 2]
    assert any(np.array_equal(m.reshape(-1), [0.0, 1.0]) for m in masks)


def test_linearized_program_reproduces_jvp(rng):
    prog = build(model(depth=3))
    params, x, t = _random(prog, rng)
    lin = linearize(prog, params, x)
    assert np.array_equal(lin.evaluate(t), jvp(prog, params, x, t))


def test_already_linear_program_keeps_kinds(rng):
    prog = build(model(depth=2, nonlinearity="identity"))
    lin = linearize(prog, init_params(prog, rng), rng.standard_normal((2, 3)))
    assert {n.kind for n in lin.nodes} <= {Kind.MATMUL, Kind.ADD, Kind.BROADCAST}


def test_nonconforming_tangent_and_cotangent(rng):
    prog = build(model())
    params, x, t = _random(prog, rng)
    with pytest.raises(T.DimensionError):
        jvp(prog, params, x, [np.zeros((2, 2))] + t[1:])
    with pytest.raises(T.DimensionError):
        vjp(prog, params, x, np.zeros((5, 1)))


def test_jvp_cost_at_most_three_forward_passes(rng):
    for spec in [model(depth=3, width=16), model("cnn", 2, 4, 3, pixels=9, filter=3, bias=True)]:
        prog = build(spec)
        params, x, t = _random(prog, rng, n=2)
        with T.counting() as fp:
            evaluate(prog, params, x)
        lin = linearize(prog, params, x)
        with T.counting() as c:
            lin.evaluate(t)
        assert c.fused_multiply_adds <= 3 * fp.fused_multiply_adds


def test_reverse_jacobian_cost_near_n_o_forward(rng):
    prog = build(model(depth=3, width=16, out=4))
    params, x, _ = _random(prog, rng, n=2)
    with T.counting() as fp:
        evaluate(prog, params, x[:1])
    lin = linearize(prog, params, x)
    from fastntk.autodiff import identity_cotangents

    with T.counting() as c:
        lin.transpose(identity_cotangents(lin))
    ratio = c.fused_multiply_adds / (2 * 4 * fp.fused_multiply_adds)
    assert 0.25 <= ratio <= 4


def test_flatten_roundtrip(rng):
    shapes = [(2, 3), (4,), (1, 2, 2)]
    blocks = [rng.standard_normal(s) for s in shapes]
    flat = flatten_params(blocks)
    back = unflatten_params(flat, shapes)
    assert all(np.array_equal(a, b) for a, b in zip(blocks, back))


def test_unsupported_primitive_error_names_kind():
    assert issubclass(UnsupportedPrimitiveError, NotImplementedError)


def test_builder_program_with_shared_parameter(rng):
    b = ProgramBuilder((3,))
    w = b.param((3, 3))
    h = b.add(Kind.MATMUL, w, b.input())
    out = b.add(Kind.MATMUL, w, b.add(Kind.RELU, h))
    prog = b.build(out)
    params = [rng.standard_normal((3, 3))]
    x = rng.standard_normal((2, 3))
    j = jacobian(prog, params, x)
    eps = 1e-6
    e = np.zeros(9)
    e[4] = 1
    d = e.reshape(3, 3)
    fd = (evaluate(prog, [params[0] + eps * d], x) - evaluate(prog, [params[0] - eps * d], x)) / (2 * eps)
    assert np.abs(fd - j[:, :, 4]).max() <= 1e-6
    assert rel_err(j, jacobian(prog, params, x, "forward")) <= 1e-12
