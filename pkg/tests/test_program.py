import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastntk import tensor as T
from fastntk.program import Kind, ModelSpec, ProgramBuilder, SpecError, build, evaluate, init_params

from conftest import model


def loop_fcn(params, x):
    out = []
    for xi in x:
        h = list(xi)
        for k, w in enumerate(params):
            h = [sum(w[i, j] * h[j] for j in range(len(h))) for i in range(w.shape[0])]
            if k < len(params) - 1:
                h = [max(v, 0.0) for v in h]
        out.append(h)
    return np.array(out)


def test_fcn_topology_and_param_sizes():
    prog = build(ModelSpec("fcn", 2, 3, 2))
    assert len(prog.nodes) == 5
    assert [math.prod(s) for s in prog.param_shapes] == [9, 9, 6]
    assert [n.kind for n in prog.nodes] == [Kind.MATMUL, Kind.RELU, Kind.MATMUL, Kind.RELU, Kind.MATMUL]


def test_fcn_forward_flops():
    prog = build(ModelSpec("fcn", 10, 8, 4))
    params = init_params(prog, np.random.default_rng(0))
    with T.counting() as c:
        evaluate(prog, params, np.ones((1, 8)))
    assert c.by_op["matmul"] == 10 * 64 + 4 * 8
    assert c.fused_multiply_adds == 672 + 10 * 8


def test_fcn_matches_loop_oracle(rng):
    prog = build(model(depth=3, width=5, out=2))
    params = init_params(prog, rng)
    x = rng.standard_normal((3, 3))
    assert np.abs(evaluate(prog, params, x) - loop_fcn(params, x)).max() <= 1e-12


def test_identity_nonlinearity_is_linear(rng):
    prog = build(model(depth=2, width=4, out=2, nonlinearity="identity"))
    assert all(n.kind.is_linear for n in prog.nodes)
    params = init_params(prog, rng)
    x = rng.standard_normal((2, 3))
    assert np.allclose(evaluate(prog, params, x), x @ params[0].T @ params[1].T @ params[2].T)


def test_bias_adds_nodes():
    plain = build(model(depth=2))
    biased = build(model(depth=2, bias=True))
    assert len(biased.nodes) == len(plain.nodes) + 3
    assert len(biased.param_shapes) == len(plain.param_shapes) + 3


def test_cnn_topology():
    prog = build(ModelSpec("cnn", 2, 2, 2, pixels=8, filter=3))
    assert [n.kind for n in prog.nodes] == [Kind.CONV, Kind.RELU, Kind.CONV, Kind.RELU, Kind.GAP, Kind.MATMUL]
    assert prog.input_shape == (1, 8, 2)


@pytest.mark.parametrize("w", [8, 16, 32])
def test_cnn_forward_flops_near_formula(w):
    spec = ModelSpec("cnn", 2, w, 4, pixels=16, filter=9)
    prog = build(spec)
    params = init_params(prog, np.random.default_rng(0))
    with T.counting() as c:
        evaluate(prog, params, np.ones((1,) + prog.input_shape))
    formula = spec.depth * spec.d * spec.f * w * w + spec.output_size * w
    assert 0.5 <= c.fused_multiply_adds / formula <= 2


def test_spec_json_roundtrip():
    text = '{"family":"fcn","depth":10,"width":64,"output_size":16,"input_dim":3,"nonlinearity":"relu","bias":false}'
    spec = ModelSpec.from_json(text)
    assert spec.input_dim == 3 and spec.depth == 10
    assert ModelSpec.from_json(spec.to_json()) == spec
    assert json.loads(spec.to_json())["family"] == "fcn"


@pytest.mark.parametrize(
    "text",
    [
        "not json",
        "[1, 2]",
        '{"family":"rnn","depth":1,"width":2,"output_size":1}',
        '{"family":"fcn","depth":1,"width":0,"output_size":1}',
        '{"family":"fcn","depth":1,"width":2}',
        '{"family":"fcn","depth":1,"width":2,"output_size":1,"colour":"red"}',
        '{"family":"cnn","depth":1,"width":2,"output_size":1,"pixels":4}',
    ],
)
def test_bad_specs_rejected(text):
    with pytest.raises(SpecError):
        ModelSpec.from_json(text)


def test_builder_rejects_nonconforming_shapes():
    b = ProgramBuilder((4,))
    with pytest.raises(T.DimensionError):
        b.add(Kind.MATMUL, b.param((3, 5)), b.input())


def test_evaluate_rejects_wrong_input(rng):
    prog = build(model())
    params = init_params(prog, rng)
    with pytest.raises(T.DimensionError):
        evaluate(prog, params, rng.standard_normal((2, 5)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 4), st.integers(1, 6), st.integers(1, 4))
def test_fcn_shapes(t, w, o):
    prog = build(ModelSpec("fcn", t, w, o, input_dim=2))
    assert prog.output_shape == (o,)
    assert prog.num_params == sum(math.prod(s) for s in prog.param_shapes)
    assert len(prog.param_shapes) == t + 1
