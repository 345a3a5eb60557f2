import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastntk import tensor as T


def naive_matmul(a, b):
    m, k = a.shape
    out = np.zeros((m, b.shape[1]))
    for i in range(m):
        for j in range(b.shape[1]):
            for r in range(k):
                out[i, j] += a[i, r] * b[r, j]
    return out


def naive_conv(x, filt):
    h, w, _ = x.shape
    fh, fw, _, co = filt.shape
    out = np.zeros((h, w, co))
    for i in range(h):
        for j in range(w):
            for a in range(fh):
                for b in range(fw):
                    out[i, j] += x[(i + a - fh // 2) % h, (j + b - fw // 2) % w] @ filt[a, b]
    return out


def test_matmul_counts_mkp():
    with T.counting() as c:
        T.matmul(np.ones((2, 3)), np.ones((3, 4)))
    assert c.fused_multiply_adds == 24
    assert c.by_op["matmul"] == 24


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    assert np.abs(T.matmul(a, b) - naive_matmul(a, b)).max() <= 1e-12


def test_matmul_dimension_error():
    with pytest.raises(T.DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_zero_extent_rejected():
    with pytest.raises(T.DimensionError):
        T.as_tensor(np.ones((0, 3)))


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((5, 5, 2))
    f = rng.standard_normal((3, 3, 2, 4))
    with T.counting() as c:
        y = T.conv2d_circular(x, f)
    assert np.abs(y - naive_conv(x, f)).max() <= 1e-12
    assert c.fused_multiply_adds == 5 * 5 * 3 * 3 * 2 * 4


def test_conv_one_by_one_filter_is_matmul(rng):
    x = rng.standard_normal((4, 4, 3))
    f = rng.standard_normal((1, 1, 3, 2))
    assert np.allclose(T.conv2d_circular(x, f), x @ f[0, 0], atol=1e-14)


def test_conv_transposes_are_adjoint(rng):
    x = rng.standard_normal((2, 4, 5, 3))
    f = rng.standard_normal((3, 2, 3, 2))
    ct = rng.standard_normal((2, 4, 5, 2))
    lhs = np.vdot(ct, T.conv2d_circular(x, f))
    assert np.isclose(lhs, np.vdot(T.conv2d_circular_transpose_input(ct, f), x), rtol=1e-12)
    gf = T.conv2d_circular_transpose_filter(x, ct, (3, 2))
    assert gf.shape == (2, 3, 2, 3, 2)
    assert np.isclose(lhs, np.vdot(gf.sum(axis=0), f), rtol=1e-12)


def test_elementwise_kinds(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    expected = np.array([[a[i, j] * b[i, j] for j in range(4)] for i in range(3)])
    with T.counting() as c:
        assert np.array_equal(T.elementwise("mul", a, b), expected)
    assert c.fused_multiply_adds == 12
    assert np.array_equal(T.elementwise("add", a, b), a + b)
    assert np.array_equal(T.elementwise("sub", a, b), a - b)
    assert np.array_equal(T.elementwise("scale", a, 2.0), 2 * a)


def test_relu_and_mask():
    v = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(T.relu(v), [0, 0, 2])
    assert np.array_equal(T.relu_mask(v), [0, 0, 1])


def test_shape_ops_cost_nothing(rng):
    a = rng.standard_normal((2, 3))
    with T.counting() as c:
        assert T.reshape(a, (3, 2)).shape == (3, 2)
        assert np.array_equal(T.transpose(a, (1, 0)), a.T)
        assert T.broadcast_in_dim(a, (4, 2, 3), (1, 2)).shape == (4, 2, 3)
    assert c.fused_multiply_adds == 0


def test_reduce_and_pool(rng):
    x = rng.standard_normal((4, 4, 2))
    with T.counting() as c:
        g = T.global_avg_pool(x)
    assert np.allclose(g, x.sum(axis=(0, 1)) / 16, atol=1e-15)
    assert c.fused_multiply_adds == x.size
    assert np.allclose(T.reduce_sum(x, (0, 2)), x.sum(axis=(0, 2)))


def test_phase_attribution():
    with T.counting() as c:
        with T.phase("one"):
            T.matmul(np.ones((2, 2)), np.ones((2, 2)))
        T.add(np.ones(3), np.ones(3))
    assert c.by_phase["one"] == 8
    assert c.fused_multiply_adds == 11


def test_peak_bytes_tracked():
    with T.counting() as c:
        T.matmul(np.ones((10, 10)), np.ones((10, 10)))
    assert c.peak_live_bytes >= 800


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=3, max_size=3))
def test_counts_depend_only_on_shapes(dims):
    m, k, p = dims
    counts = []
    for seed in (0, 1):
        r = np.random.default_rng(seed)
        with T.counting() as c:
            T.matmul(r.standard_normal((m, k)), r.standard_normal((k, p)))
        counts.append(c.fused_multiply_adds)
    assert counts[0] == counts[1] == m * k * p
