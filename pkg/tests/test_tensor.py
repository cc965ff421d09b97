import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from simaug_lab import tensor as nd
from simaug_lab.tensor import Tensor

import gradcases


@pytest.mark.parametrize("name", sorted(gradcases.PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    assert gradcases.primitive_error(name) < 1e-4


def test_three_layer_network_gradient():
    assert gradcases.three_layer_error() < 1e-4


def test_softmax_uniform_logits():
    np.testing.assert_allclose(nd.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_softmax_is_a_distribution(x):
    p = nd.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


def test_conv2d_counts_overlap():
    out = nd.conv2d(Tensor(np.ones((1, 5, 5, 1))), Tensor(np.ones((3, 3, 1, 1))))
    assert out.shape == (1, 5, 5, 1)
    assert out.data[0, 2, 2, 0] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_gru_cell_matches_composed_ops():
    rng = np.random.default_rng(3)
    gx = rng.uniform(-1, 1, size=(2, 3, 4, 6))
    state = rng.uniform(-1, 1, size=(2, 3, 4, 2))
    w = rng.uniform(-1, 1, size=(3, 3, 2, 6))
    fused = nd.conv_gru_cell(Tensor(gx), Tensor(state), Tensor(w)).data

    def sig(a):
        return 1 / (1 + np.exp(-a))

    gh = nd.conv2d(Tensor(state), Tensor(w)).data
    z = sig(gx[..., 0:2] + gh[..., 0:2])
    r = sig(gx[..., 2:4] + gh[..., 2:4])
    cand = np.tanh(gx[..., 4:6] + r * gh[..., 4:6])
    np.testing.assert_allclose(fused, z * state + (1 - z) * cand, atol=1e-12)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nd.backward(nd.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_loss_gives_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = nd.gradients(Tensor(3.0) + 0.0 * nd.sum(Tensor([5.0])), [x])
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_fan_out_accumulates():
    x = Tensor([0.5, -1.5], requires_grad=True)
    y = x * x + x + x * 3.0
    nd.backward(nd.sum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 4.0)


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))

    def l1():
        return nd.sum(nd.tanh(x @ w))

    def l2():
        return nd.sum(nd.softmax(x @ w) * Tensor([[1.0, 2.0]]))

    (g1,) = nd.gradients(l1(), [w])
    (g2,) = nd.gradients(l2(), [w])
    (g12,) = nd.gradients(l1() + l2(), [w])
    np.testing.assert_allclose(g12, g1 + g2, atol=1e-12)


def test_tape_visits_each_node_once():
    x = Tensor([2.0], requires_grad=True)
    y = x
    for _ in range(30):
        y = y + y  # fan-out doubles at each level
    nd.backward(nd.sum(y))
    assert x.grad[0] == 2.0**30


def test_non_scalar_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nd.ShapeError):
        nd.backward(x * 2.0)


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(nd.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(nd.ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with nd.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y._backward is None


def test_debug_mode_flags_non_finite_values():
    nd.set_debug(True)
    try:
        with pytest.raises(nd.NonFiniteError), np.errstate(divide="ignore"):
            nd.log(Tensor([-1.0]), eps=0.0)
    finally:
        nd.set_debug(False)


def test_input_gradient_leaves_parameters_alone():
    w = Tensor([2.0, -1.0], requires_grad=True)
    w.grad = np.array([7.0, 7.0])

    def loss(f, _labels):
        return nd.sum(f * w) * 3.0

    g = nd.input_gradient(loss, Tensor([0.3, 0.4]), frozen=[w])
    np.testing.assert_allclose(g.data, [6.0, -3.0])
    np.testing.assert_array_equal(w.grad, [7.0, 7.0])
    assert w.requires_grad


def test_input_gradient_scalar_and_independent_cases():
    g = nd.input_gradient(lambda f, _: f * 3.0, Tensor([1.7]))
    assert g.data[0] == pytest.approx(3.0)
    g = nd.input_gradient(lambda f, _: nd.sum(Tensor([4.0])) + 0.0 * nd.sum(Tensor([1.0])), Tensor([1.0, 2.0]))
    np.testing.assert_array_equal(g.data, [0.0, 0.0])


def test_sign_examples():
    np.testing.assert_array_equal(nd.sign(Tensor([0.5, -0.2, 0.0])).data, [1.0, -1.0, 0.0])
    np.testing.assert_array_equal(nd.sign(Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


@given(arrays(np.float64, 10, elements=st.floats(-1e6, 1e6)))
def test_sign_is_idempotent(x):
    s = nd.sign(Tensor(x))
    np.testing.assert_array_equal(nd.sign(s).data, s.data)


def test_noise_zero_bound():
    np.testing.assert_array_equal(nd.sample_linf_noise((3, 2), 0.0, np.random.default_rng(0)).data, 0.0)


def test_noise_negative_bound_raises():
    with pytest.raises(ValueError):
        nd.sample_linf_noise((3,), -0.1, np.random.default_rng(0))


def test_noise_seeded_golden():
    a = nd.sample_linf_noise((2,), 0.1, np.random.default_rng(42), dtype=np.float64).data
    b = nd.sample_linf_noise((2,), 0.1, np.random.default_rng(42), dtype=np.float64).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, [0.05479120971119267, -0.012224312049589542], atol=1e-15)


@given(st.floats(0, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_noise_respects_bound(bound, seed):
    x = nd.sample_linf_noise((50,), bound, np.random.default_rng(seed)).data
    assert np.max(np.abs(x)) <= np.float32(bound)


def test_dump_format_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    path = tmp_path / "t.bin"
    nd.dump_tensor(arr, path)
    raw = path.read_bytes()
    assert raw[:16] == np.array([3, 2, 3, 4], dtype="<u4").tobytes()
    assert len(raw) == 16 + 24 * 4
    np.testing.assert_array_equal(nd.load_tensor(path).data, arr)
