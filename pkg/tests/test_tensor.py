import itertools

import numpy as np
import pytest

from segrobust import tensor as T
from segrobust.errors import ContractError, ShapeError
from segrobust.tensor import Tape, Tensor, check_gradients, precision


def grads_of(build, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        root = build(*leaves)
    tape.backward(root)
    return [t.grad for t in leaves]


def loop_xcorr(x, k, b):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                acc = b[o]
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            ii, jj = i + u - ph, j + v - pw
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += x[c, ii, jj] * k[o, c, u, v]
                out[o, i, j] = acc
    return out


def test_tensor_rejects_rank_5():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_precision_modes_set_dtype():
    assert Tensor([1.0]).dtype == np.float32
    with precision("double"):
        assert Tensor([1.0]).dtype == np.float64


def test_conv_scalar_kernel_scales():
    x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    out = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[[2, 4], [6, 8]]])


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    with precision("double"):
        out = T.conv2d(Tensor(x), Tensor(k), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 4, 4))
    k = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=2)
    with precision("double"):
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(out.data, loop_xcorr(x, k, b), atol=1e-6)


def test_conv_multichannel_5x5_oracle(rng):
    x = rng.normal(size=(3, 6, 5))
    k = rng.normal(size=(2, 3, 5, 5))
    b = rng.normal(size=2)
    with precision("double"):
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(out.data, loop_xcorr(x, k, b), atol=1e-9)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor([0.0]))


def test_conv_batch_matches_single_bitwise(rng):
    x = rng.normal(size=(5, 2, 8, 8)).astype(np.float32)
    k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    batched = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    for i in range(5):
        single = T.conv2d(Tensor(x[i]), Tensor(k), Tensor(b)).data
        assert np.array_equal(batched[i], single)


def test_relu_forward_and_subgradient():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    (g,) = grads_of(lambda x: T.sum_(T.relu(x)), np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(g, [0, 1])


def test_sigmoid_values_and_saturation():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    (g,) = grads_of(lambda x: T.sum_(T.sigmoid(x)), np.array([0.0]))
    assert g[0] == pytest.approx(0.25)
    with np.errstate(over="raise"):
        x = np.array([-400.0, 400.0], dtype=np.float32)
        out = T.sigmoid(Tensor(x)).data
        (g,) = grads_of(lambda t: T.sum_(T.sigmoid(t)), x)
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.isfinite(g))


def test_maxpool_values_and_tie_rule():
    assert T.maxpool2x2(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [[[4.0]]]
    x = np.full((1, 2, 2), 5.0)
    assert T.maxpool2x2(Tensor(x)).data.tolist() == [[[5.0]]]
    (g,) = grads_of(lambda t: T.sum_(T.maxpool2x2(t)), x)
    np.testing.assert_array_equal(g, [[[1, 0], [0, 0]]])


def test_maxpool_odd_extent():
    with pytest.raises(ShapeError):
        T.maxpool2x2(Tensor(np.zeros((1, 3, 4))))


def test_upsample_values_and_gradient(rng):
    assert T.upsample2x2(Tensor([[[1.0]]])).data.tolist() == [[[1, 1], [1, 1]]]
    (g,) = grads_of(lambda t: T.sum_(T.upsample2x2(t)), rng.normal(size=(2, 3, 3)))
    np.testing.assert_array_equal(g, np.full((2, 3, 3), 4.0))


def test_concat_layout_and_gradient():
    a = np.ones((1, 2, 2))
    b = np.zeros((1, 2, 2))
    out = T.concat_channels(Tensor(a), Tensor(b))
    assert out.shape == (2, 2, 2)
    np.testing.assert_array_equal(out.data[0], a[0])
    ga, gb = grads_of(lambda x, y: T.sum_(T.concat_channels(x, y)), a, b)
    np.testing.assert_array_equal(ga, 1.0)
    np.testing.assert_array_equal(gb, 1.0)
    with pytest.raises(ShapeError):
        T.concat_channels(Tensor(a), Tensor(np.zeros((1, 3, 2))))


def test_backward_sum_gives_ones(rng):
    (g,) = grads_of(lambda x: T.sum_(x), rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(g, 1.0)


def test_backward_constant_root_gives_zeros():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        root = T.sum_(Tensor(np.ones(2)))
    tape.backward(root)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_gradient_accumulates_over_reuse():
    (g,) = grads_of(lambda x: T.sum_(x * x + x), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [3.0, -3.0])


def test_conv_gradients_vs_finite_differences(rng):
    params = {"x": rng.normal(size=(2, 5, 4)), "k": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)}
    rep = check_gradients(lambda p: T.sum_(T.conv2d(p["x"], p["k"], p["b"])), params)
    assert rep.passed, rep.errors


def test_linear_map_exact():
    w = np.array([0.3, -1.2, 2.0])
    x = np.array([1.5, 0.25, -0.75])
    rep = check_gradients(lambda p: T.sum_(p["w"] * x), {"w": w})
    assert rep.max_error < 1e-9


def test_constant_graph_zero_error():
    rep = check_gradients(lambda p: T.sum_(Tensor(np.ones(3))), {"w": np.ones(2)})
    assert rep.max_error == 0.0 and rep.passed


ELEMENTWISE = {
    "add": lambda p: T.sum_(T.add(p["a"], p["b"]) * p["a"]),
    "sub": lambda p: T.sum_(T.sub(p["a"], p["b"]) * p["b"]),
    "mul": lambda p: T.sum_(T.mul(p["a"], p["b"])),
    "div": lambda p: T.sum_(T.div(p["a"], p["b"] * p["b"] + 1.0)),
    "power": lambda p: T.sum_(T.power(p["b"] * p["b"] + 0.5, 1.7)),
    "log": lambda p: T.sum_(T.log(p["b"] * p["b"] + 0.1)),
    "clamp": lambda p: T.sum_(T.clamp(p["a"], -0.5, 0.5) * p["b"]),
    "relu": lambda p: T.sum_(T.relu(p["a"]) * p["b"]),
    "sigmoid": lambda p: T.sum_(T.sigmoid(p["a"]) * p["b"]),
    "mean": lambda p: T.mean(p["a"] * p["b"]),
    "sum_axis": lambda p: T.sum_(T.sum_(p["a"], axis=1) * T.sum_(p["b"], axis=1)),
    "broadcast": lambda p: T.sum_(p["a"] * T.sum_(p["b"], axis=0)),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    r = np.random.default_rng(abs(hash(name)) % 2**32)
    a = r.normal(size=(3, 4))
    a[np.abs(a) < 0.05] += 0.2  # keep away from kinks
    a[np.abs(np.abs(a) - 0.5) < 0.05] += 0.2
    rep = check_gradients(ELEMENTWISE[name], {"a": a, "b": r.normal(size=(3, 4))})
    assert rep.max_error < 1e-6, rep.errors


@pytest.mark.parametrize("name", ["maxpool", "upsample", "concat"])
def test_spatial_gradients(name, rng):
    builds = {
        "maxpool": lambda p: T.sum_(T.maxpool2x2(p["a"]) * T.maxpool2x2(p["b"])),
        "upsample": lambda p: T.sum_(T.upsample2x2(p["a"]) * T.upsample2x2(p["b"])),
        "concat": lambda p: T.sum_(T.concat_channels(p["a"], p["b"]) * T.concat_channels(p["b"], p["a"])),
    }
    rep = check_gradients(builds[name], {"a": rng.normal(size=(2, 1, 4, 4)), "b": rng.normal(size=(2, 1, 4, 4))})
    assert rep.max_error < 1e-6, rep.errors


def test_mixed_precision_rejected():
    a = Tensor(np.ones(2))
    with precision("double"):
        b = Tensor(np.ones(2))
    with pytest.raises(ContractError):
        T.add(a, b)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with T.no_tape():
            T.sum_(x * x)
    assert len(tape.records) == 0


@pytest.mark.parametrize("shape", list(itertools.product([1, 2], [2, 4], [2, 6])))
def test_maxpool_upsample_shapes(shape):
    x = Tensor(np.arange(np.prod(shape), dtype=np.float32).reshape(shape))
    assert T.upsample2x2(T.maxpool2x2(x)).shape == shape
