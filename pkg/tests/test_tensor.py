import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays, broadcastable_shapes

from ssmrul import fft as F
from ssmrul import tensor as T
from ssmrul.tensor import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- elementwise ------------------------------------------------------------


def test_add_example():
    np.testing.assert_array_equal(T.add([1, 2], [3, 4]).data, [4, 6])


def test_mul_by_ones_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(T.mul(x, T.ones_like(x)).data, x.data)


def test_relu_example():
    np.testing.assert_array_equal(T.relu([-1.5, 0.0, 2.5]).data, [0.0, 0.0, 2.5])


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "neg", "exp", "relu", "gelu", "sigmoid", "tanh"])
def test_elementwise_dispatch(kind):
    a = np.array([0.5, -1.0, 2.0])
    b = np.array([1.5, 2.0, -0.5])
    ref = {
        "add": a + b,
        "sub": a - b,
        "mul": a * b,
        "div": a / b,
        "neg": -a,
        "exp": np.exp(a),
        "relu": np.maximum(a, 0),
        "gelu": 0.5 * a * (1 + np.tanh(np.sqrt(2 / np.pi) * (a + 0.044715 * a**3))),
        "sigmoid": 1 / (1 + np.exp(-a)),
        "tanh": np.tanh(a),
    }[kind]
    binary = kind in ("add", "sub", "mul", "div")
    out = T.elementwise(kind, a, b if binary else None)
    np.testing.assert_allclose(out.data, ref, rtol=1e-14, atol=1e-15)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(np.zeros((2, 3)), np.zeros(4))


def test_division_fault_on_tiny_divisor():
    with pytest.raises(T.DivisionFault):
        T.div([1.0, 2.0], [1.0, 1e-301])
    T.div([1.0], [1e-299])  # just above the floor


def test_complex_never_coerces_to_real():
    z = Tensor(np.array([1 + 2j]))
    with pytest.raises(TypeError):
        z.item()
    with pytest.raises(TypeError):
        T.relu(z)
    assert T.real(z).data[0] == 1.0


def test_graph_recorded_only_when_needed():
    a = Tensor([1.0, 2.0])
    out = T.exp(a)
    assert not out.requires_grad and out._parents == ()
    b = leaf([1.0, 2.0])
    assert T.exp(b).requires_grad
    with T.no_grad():
        assert not T.exp(b).requires_grad


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_broadcast_matches_explicit_tiling(data):
    shape_a = data.draw(array_shapes(min_dims=1, max_dims=3, max_side=4), label="a")
    shape_b = data.draw(broadcastable_shapes(shape=shape_a, min_dims=1, max_dims=3), label="b")
    floats = st.floats(-10, 10, allow_nan=False)
    a = data.draw(arrays(np.float64, shape_a, elements=floats))
    b = data.draw(arrays(np.float64, shape_b, elements=floats))
    out = np.broadcast_shapes(shape_a, shape_b)
    tiled = T.mul(np.broadcast_to(a, out).copy(), np.broadcast_to(b, out).copy())
    assert np.array_equal(T.mul(a, b).data, tiled.data)


# -- matmul -------------------------------------------------------------------


def test_matmul_examples():
    np.testing.assert_array_equal(T.matmul([[1, 0], [0, 1]], [[5], [7]]).data, [[5], [7]])
    np.testing.assert_array_equal(T.matmul([[1, 2]], [[3], [4]]).data, [[11]])


def test_matmul_gradient_wrt_a_is_c():
    p = np.array([0.3, -1.2, 2.5, 0.7])  # a, b, c, d

    def f(v):
        row = T.reshape(v[0:2], (1, 2))
        col = T.reshape(v[2:4], (2, 1))
        return T.tsum(T.matmul(row, col))

    x = leaf(p)
    T.backward(f(x))
    assert x.grad[0] == pytest.approx(p[2])
    assert T.finite_difference_check(f, p, 1e-6) < 1e-8


def test_matmul_inner_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_batch_broadcast_grad():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    assert T.finite_difference_check(lambda v: T.tsum(T.matmul(a, v) ** 2), b) < 1e-6
    assert T.finite_difference_check(lambda v: T.tsum(T.matmul(v, b) ** 2), a) < 1e-6


def test_mac_counter():
    with T.count_mult_adds() as c:
        T.matmul(np.zeros((7, 2, 3)), np.zeros((3, 5)))
    assert c.total == 7 * 2 * 3 * 5


# -- FFT convolution ------------------------------------------------------------


def test_conv_examples():
    np.testing.assert_allclose(T.fft_causal_conv([[1, 2, 3]], [1, 0, 0]).data, [[1, 2, 3]], atol=1e-14)
    np.testing.assert_allclose(T.fft_causal_conv([[1, 1, 1]], [1, 1, 0]).data, [[1, 2, 2]], atol=1e-14)
    k = np.random.default_rng(0).normal(size=9)
    assert np.all(np.abs(T.fft_causal_conv(np.zeros((2, 9)), k).data) < 1e-300)


def test_conv_length_mismatch():
    with pytest.raises(T.ShapeError):
        T.fft_causal_conv(np.zeros((1, 4)), np.zeros(3))


@pytest.mark.parametrize("L", [1, 2, 3, 17, 128, 1000, 4096])
@pytest.mark.parametrize("backend", F.BACKENDS)
def test_conv_matches_direct(L, backend):
    rng = np.random.default_rng(L)
    u = rng.uniform(-1, 1, size=(2, L))
    k = rng.uniform(-1, 1, size=L)
    if L > 1000:
        # the O(L^2) oracle as a Toeplitz product
        idx = np.arange(L)
        toe = np.where(idx[:, None] >= idx[None, :], k[(idx[:, None] - idx[None, :]) % L], 0.0)
        ref = u @ toe.T
    else:
        ref = F.direct_causal_conv(u, k)
    with F.use_backend(backend):
        out = T.fft_causal_conv(u, k).data
    assert np.max(np.abs(out - ref)) < 1e-10


def test_radix2_fft_matches_numpy():
    x = np.random.default_rng(0).normal(size=(3, 64)) + 1j
    np.testing.assert_allclose(F.fft(x), np.fft.fft(x), atol=1e-12)
    np.testing.assert_allclose(F.fft(F.fft(x), inverse=True), x, atol=1e-12)
    with pytest.raises(ValueError):
        F.fft(np.zeros(6))


def test_fft_size():
    assert [F.conv_fft_size(L) for L in (1, 2, 3, 5, 100)] == [1, 4, 8, 16, 256]


def test_conv_bitwise_deterministic():
    rng = np.random.default_rng(3)
    u, k = rng.normal(size=(4, 300)), rng.normal(size=300)
    assert T.fft_causal_conv(u, k).data.tobytes() == T.fft_causal_conv(u, k).data.tobytes()


@pytest.mark.parametrize("complex_kernel", [False, True])
def test_conv_gradient(complex_kernel):
    rng = np.random.default_rng(5)
    u = rng.normal(size=(2, 11))
    w = rng.normal(size=11)
    kc = rng.normal(size=11) + 1j * rng.normal(size=11)

    def via_kernel(k):
        kk = T.mul(T.complex_(k, k * 0.5), kc) if complex_kernel else k
        return T.tsum(T.real(T.fft_causal_conv(u, kk)) * w)

    def via_signal(x):
        return T.tsum(T.fft_causal_conv(x, rng_k) ** 2)

    rng_k = rng.normal(size=11)
    assert T.finite_difference_check(via_kernel, rng.normal(size=11)) < 1e-6
    assert T.finite_difference_check(via_signal, u) < 1e-6


# -- backward -------------------------------------------------------------------


def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = leaf([2.0, -3.0])
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [4, -6])


def test_backward_root_grad_is_one():
    x = leaf(3.0)
    grads = T.backward(x)
    assert grads[x.node_id] == 1.0


def test_backward_rejects_non_scalar():
    with pytest.raises(T.ShapeError):
        T.backward(leaf([1.0, 2.0]) * 2)


def test_every_leaf_gets_same_shape_grad():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones(3))
    T.backward(T.tsum(T.tanh(a * b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_reverse_topological_order():
    x = leaf(1.0)
    y = T.exp(x)
    z = y * y + y
    g = T.ComputeGraph(z)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_cycle_detection():
    a = leaf(1.0)
    b = a * 2
    a._parents = (b,)  # corrupt the tape by hand
    with pytest.raises(T.GraphCycleError):
        T.ComputeGraph(b)


COMPOSITES = {
    "poly": lambda p: T.tsum(p * p * p - 2 * p),
    "exp_log": lambda p: T.tsum(T.log(T.exp(p) + 1.5)),
    "sqrt_div": lambda p: T.tsum(T.sqrt(p * p + 1) / (p * p + 2)),
    "activations": lambda p: T.tsum(T.gelu(p) * T.sigmoid(p) + T.tanh(p) + T.softplus(p)),
    "reduce_shape": lambda p: T.mean(T.transpose(T.reshape(p, (2, 3)), (1, 0))[1:] ** 2),
    "stack_concat": lambda p: T.tsum(T.concat([p, p[::-1]]) * T.stack([p, p], axis=-1)[:, 0].sum()),
    "advanced_index": lambda p: T.tsum(p[np.array([0, 0, 3, 5])] ** 2),
    "complex": lambda p: T.tsum(T.real(T.complex_(p, p * p) * T.conj(T.complex_(p, -p)) * (1 + 2j))),
    "matmul_pow": lambda p: T.tsum(T.matmul(T.reshape(p, (2, 3)), T.reshape(p, (3, 2))) ** 2),
    "where": lambda p: T.tsum(T.where(p.data > 0, p * 3, p * p)),
}


@pytest.mark.parametrize("name", sorted(COMPOSITES))
@pytest.mark.parametrize("seed", range(10))
def test_composites_match_finite_differences(name, seed):
    p = np.random.default_rng(seed).normal(size=6)
    if name == "where":
        p = p + np.sign(p) * 0.1  # keep away from the kink
    assert T.finite_difference_check(COMPOSITES[name], p, 1e-5) < 1e-4


def test_fd_check_exact_for_quadratic():
    p = np.random.default_rng(0).normal(size=8)
    assert T.finite_difference_check(lambda v: T.tsum(v * v), p, 1e-3) < 1e-9


def test_fd_check_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        T.finite_difference_check(lambda v: T.tsum(v), [1.0], 0.0)


def test_fd_check_pinball_two_layer_net():
    from ssmrul.sqr import masked_objective

    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 5, 3))
    y = rng.uniform(0, 2, size=(4, 5))
    taus = rng.uniform(0.1, 0.9, 4)
    sizes = [(3, 6), (6,), (6, 1), (1,)]
    n = sum(int(np.prod(s)) for s in sizes)

    def f(p):
        parts, i = [], 0
        for s in sizes:
            k = int(np.prod(s))
            parts.append(T.reshape(p[i : i + k], s))
            i += k
        h = T.tanh(T.matmul(x, parts[0]) + parts[1])
        out = T.reshape(T.matmul(h, parts[2]) + parts[3], (4, 5))
        return masked_objective(y, np.ones((4, 5)), out, taus)

    assert T.finite_difference_check(f, rng.normal(size=n) * 0.5) < 1e-4


def test_repeat_runs_are_bit_identical():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=5)

    def run():
        x = leaf(a)
        loss = T.tsum(T.gelu(T.matmul(x, x)) * b)
        T.backward(loss)
        return loss.data.tobytes() + x.grad.tobytes()

    assert run() == run()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, array_shapes(max_dims=3, max_side=4), elements=st.floats(-5, 5)))
def test_sum_gradient_is_ones(x):
    t = leaf(x)
    T.backward(T.tsum(t))
    np.testing.assert_array_equal(t.grad, np.ones_like(x))
