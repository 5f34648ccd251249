import json

import mpmath
import numpy as np
import pytest

from lgnet.nn import (
    ARCHS,
    Activation,
    CheckpointError,
    Conv1D,
    Dense,
    Flatten,
    Network,
    NetworkConfig,
    activation_forward,
    activation_grad,
    build_network,
    conv1d_forward,
)


def tiny(arch, P=8, n_out=6, blocks=1, filters=3, seed=0):
    return build_network(NetworkConfig(arch, P, n_out, blocks=blocks, filters=filters, init_seed=seed))


# ---- config and construction ---------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig("linear", 8, 6, kernel_size=4)
    with pytest.raises(ValueError):
        NetworkConfig("resnet", 8, 6)
    with pytest.raises(ValueError):
        NetworkConfig("netc", 8, 6, blocks=-1)
    c = NetworkConfig("NetC", 8, 6, kernel_size=7)
    assert c.arch == "netc" and c.padding == 3 and c.stride == 1


def test_linear_layer_list():
    net = build_network(NetworkConfig("linear", 64, 62))
    assert [type(l) for l in net.layers] == [Conv1D, Flatten, Dense]
    assert net.forward(np.zeros((1, 64))).shape == (1, 62)
    deeper = build_network(NetworkConfig("linear", 16, 14, blocks=2))
    assert [type(l) for l in deeper.layers] == [Conv1D, Conv1D, Conv1D, Flatten, Dense]


def test_netc_four_blocks_has_four_swish_none_after_final_conv():
    net = build_network(NetworkConfig("netc", 31, 29, blocks=4, filters=32, kernel_size=5))
    acts = [l for l in net.layers if isinstance(l, Activation)]
    assert len(acts) == 4 and all(a.kind == "swish" for a in acts)
    assert [type(l) for l in net.layers[-3:]] == [Conv1D, Flatten, Dense]
    assert net.layers[-1].weight.shape == (29, 32 * 31)


def test_same_seed_same_bytes_and_architecture_equivalence():
    a = tiny("neta", seed=5).get_flat()
    assert a.tobytes() == tiny("neta", seed=5).get_flat().tobytes()
    assert a.tobytes() == tiny("netb", seed=5).get_flat().tobytes() == tiny("netc", seed=5).get_flat().tobytes()
    assert a.tobytes() != tiny("neta", seed=6).get_flat().tobytes()


def test_init_bounds():
    net = build_network(NetworkConfig("neta", 16, 14, blocks=2, filters=4))
    conv0, conv1 = net.layers[0], net.layers[2]
    assert np.max(np.abs(conv0.weight.value)) <= np.sqrt(1 / 5)
    assert np.max(np.abs(conv1.weight.value)) <= np.sqrt(1 / 20)
    assert np.max(np.abs(net.layers[-1].weight.value)) <= np.sqrt(1 / (4 * 16))


def test_shape_chain_rejected():
    with pytest.raises(ValueError):
        Network(NetworkConfig("linear", 8, 6), [Conv1D(np.zeros((3, 1, 5)), np.zeros(3), 2), Flatten(),
                                                Dense(np.zeros((6, 25)), np.zeros(6))])


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_conv_preserves_length(k):
    net = build_network(NetworkConfig("netc", 13, 11, blocks=2, filters=2, kernel_size=k))
    x = np.random.default_rng(0).standard_normal((3, 13))
    out = x[:, :, None]
    for layer in net.layers[:-2]:
        out = layer.forward(out)
        assert out.shape[1] == 13


# ---- convolution and activations -------------------------------------------------

@pytest.mark.parametrize("kernel,bias,expected", [
    ([0, 1, 0], 0.0, [1, 2, 3]),
    ([1, 0, -1], 0.0, [-2, -2, 2]),
    ([0, 0, 0], 7.0, [7, 7, 7]),
])
def test_conv1d_examples(kernel, bias, expected):
    out = conv1d_forward(np.array([1.0, 2.0, 3.0]), np.array(kernel, dtype=float), bias, padding=1)
    assert np.allclose(out, [expected])


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 10))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    xp = np.pad(x, ((0, 0), (2, 2)))
    direct = np.array([[b[c] + np.sum(w[c] * xp[:, i:i + 5]) for i in range(10)] for c in range(4)])
    assert np.allclose(conv1d_forward(x, w, b, padding=2), direct, atol=1e-13)


def test_conv1d_rejects_bad_shapes():
    with pytest.raises(ValueError):
        conv1d_forward(np.zeros((2, 5)), np.zeros((1, 3, 3)), 0.0, padding=1)
    with pytest.raises(ValueError):
        conv1d_forward(np.zeros(5), np.zeros(3), 0.0, stride=2, padding=1)


def test_activation_examples():
    assert activation_forward("swish", 0.0) == 0.0
    assert activation_forward("sigmoid", 0.0) == 0.5
    mpmath.mp.dps = 30
    oracle = float(mpmath.mpf(10) / (1 + mpmath.exp(-10)))
    assert activation_forward("swish", 10.0) == pytest.approx(oracle, rel=1e-15)
    assert str(activation_forward("swish", 10.0)).startswith("9.999546")
    assert activation_grad("swish", 0.0) == 0.5
    assert activation_grad("relu", 0.0) == 0.0
    assert activation_grad("relu", 1e-300) == 1.0
    assert np.all(np.isfinite(activation_forward("sigmoid", np.array([-1000.0, 1000.0]))))
    with pytest.raises(ValueError):
        activation_forward("tanh", 1.0)


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "swish"])
def test_activation_derivative_finite_difference(kind):
    x = np.linspace(-4, 4, 41) + 0.013
    h = 1e-6
    fd = (activation_forward(kind, x + h) - activation_forward(kind, x - h)) / (2 * h)
    assert np.allclose(activation_grad(kind, x), fd, atol=1e-8)


# ---- forward / backward -------------------------------------------------------------

def test_forward_rejects_width_mismatch():
    with pytest.raises(ValueError):
        tiny("linear").forward(np.zeros((2, 9)))


def test_zero_initialized_linear_net_maps_zero_to_zero():
    net = tiny("linear")
    net.set_flat(np.zeros(net.num_parameters))
    assert np.all(net.forward(np.zeros((3, 8))) == 0)


def test_per_sample_independence_and_determinism():
    net = tiny("netc")
    x = np.random.default_rng(1).standard_normal((1, 8))
    pair = net.forward(np.vstack([x, x]))
    single = net.forward(x)
    assert np.array_equal(pair[0], pair[1]) and np.allclose(pair[0], single[0], rtol=0, atol=1e-15)
    assert np.array_equal(net.forward(x), single)


def test_backward_requires_forward():
    net = tiny("neta")
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 6)))
    net.forward(np.zeros((1, 8)))
    net.backward(np.zeros((1, 6)))
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 6)))


def test_zero_output_grad_keeps_grads_zero():
    net = tiny("netb")
    net.zero_grad()
    net.forward(np.random.default_rng(0).standard_normal((4, 8)))
    net.backward(np.zeros((4, 6)))
    assert np.all(net.grad_flat() == 0)


@pytest.mark.parametrize("arch", ARCHS)
def test_parameter_and_input_gradients_finite_difference(arch):
    rng = np.random.default_rng(3)
    net = tiny(arch)
    x = rng.standard_normal((5, 8))
    head = rng.standard_normal((5, 6))
    theta = net.get_flat()

    def scalar(th, xx=x):
        net.set_flat(th)
        return float(np.sum(head * net.forward(xx)))

    scalar(theta)
    net.zero_grad()
    gx = net.backward(head)
    g = net.grad_flat()
    h = 1e-6
    fd = np.array([(scalar(theta + h * e) - scalar(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
    rel = np.abs(fd - g) / np.maximum(np.abs(g), 1e-4)
    assert rel.max() <= 1e-5
    # input gradient
    fdx = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            d = np.zeros_like(x)
            d[i, j] = h
            fdx[i, j] = (scalar(theta, x + d) - scalar(theta, x - d)) / (2 * h)
    assert np.max(np.abs(fdx - gx) / np.maximum(np.abs(gx), 1e-4)) <= 1e-5


def test_gradients_accumulate_until_zeroed():
    net = tiny("netc")
    x = np.random.default_rng(0).standard_normal((2, 8))
    net.zero_grad()
    net.forward(x)
    net.backward(np.ones((2, 6)))
    g1 = net.grad_flat()
    net.forward(x)
    net.backward(np.ones((2, 6)))
    assert np.allclose(net.grad_flat(), 2 * g1)
    for p in net.parameters:
        assert p.grad.shape == p.value.shape


def test_linear_architecture_is_affine():
    net = build_network(NetworkConfig("linear", 16, 14, blocks=2, filters=4, init_seed=9))
    rng = np.random.default_rng(4)
    x1, x2 = rng.standard_normal((2, 1, 16))
    a, b = 1.7, -0.4
    lhs = net.forward(a * x1 + b * x2)
    rhs = a * net.forward(x1) + b * net.forward(x2) - (a + b - 1) * net.forward(np.zeros((1, 16)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_describe_mentions_architecture():
    text = build_network(NetworkConfig("netc", 31, 29, blocks=4)).describe()
    assert "arch=netc" in text and "blocks=4" in text and "filters=32" in text and "kernel_size=5" in text


# ---- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    from lgnet.data import NormStats

    net = tiny("netc", seed=11)
    net.input_norm = NormStats(1.5, 2.0)
    net.save(tmp_path / "ck")
    assert (tmp_path / "ck" / "params.bin").stat().st_size == 8 * net.num_parameters
    raw = np.fromfile(tmp_path / "ck" / "params.bin", dtype="<f8")
    assert np.array_equal(raw, net.get_flat())
    meta = json.loads((tmp_path / "ck" / "meta.json").read_text())
    assert meta["format_version"] == 1 and meta["config"]["arch"] == "netc"
    back = Network.load(tmp_path / "ck")
    assert back.get_flat().tobytes() == net.get_flat().tobytes()
    assert back.config == net.config and back.input_norm == net.input_norm
    x = np.random.default_rng(0).standard_normal((3, 8))
    assert np.array_equal(back.predict(x), net.predict(x))


def test_checkpoint_length_validated(tmp_path):
    net = tiny("neta")
    net.save(tmp_path / "ck")
    p = tmp_path / "ck" / "params.bin"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        Network.load(tmp_path / "ck")


def test_checkpoint_bad_header(tmp_path):
    net = tiny("neta")
    net.save(tmp_path / "ck")
    (tmp_path / "ck" / "meta.json").write_text("[]")
    with pytest.raises(CheckpointError):
        Network.load(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        Network.load(tmp_path / "nowhere")


def test_predict_applies_input_norm():
    from lgnet.data import NormStats

    net = tiny("netc")
    x = np.random.default_rng(0).standard_normal((2, 8))
    net.input_norm = NormStats(0.5, 3.0)
    assert np.allclose(net.predict(x), net.forward((x - 0.5) / 3.0))
