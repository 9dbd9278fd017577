import numpy as np
import pytest

from noise2fast import model, tensor
from noise2fast.model import CHANNEL_PLAN, Network, build_network
from noise2fast.tensor import AdamState, ConvLayer

from conftest import random_conv_layer
from test_tensor import assert_close_rel, finite_diff


def expected_parameter_count(in_channels=1):
    total = 0
    prev = in_channels
    for out in CHANNEL_PLAN:
        total += out * prev * 9 + out
        prev = out
    total += prev * 1 + 1
    return total


def stub_network(rng, in_ch=1, hidden=3, dtype=np.float32):
    """Tiny two-layer network for composition and gradient tests."""
    l1 = random_conv_layer(rng, in_ch, hidden, 3, activation="relu", dtype=dtype)
    l2 = random_conv_layer(rng, hidden, 1, 1, activation="identity", dtype=dtype)
    states = [
        (AdamState.zeros_like(l.weights), AdamState.zeros_like(l.bias)) for l in (l1, l2)
    ]
    return Network(layers=[l1, l2], opt_states=states, in_channels=in_ch, seed=0)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def test_parameter_count_matches_channel_plan():
    net = build_network(1, seed=0)
    count = model.parameter_count(net)
    assert count == expected_parameter_count(1)
    assert count == 1_171_937  # frozen sum over the (32,32,64,64,128,128,256,256)+1x1 plan
    assert net.layers[0].weights.size + net.layers[0].bias.size == 320


def test_network_shape_invariant():
    net = build_network(1, seed=1)
    assert len(net.layers) == 9
    assert tuple(l.out_channels for l in net.layers[:-1]) == CHANNEL_PLAN
    assert net.layers[-1].weights.shape == (1, 256, 1, 1)
    assert all(l.activation == "relu" for l in net.layers[:-1])
    assert net.layers[-1].activation == "identity"
    assert all(not l.bias.any() for l in net.layers)


def test_same_seed_bitwise_identical():
    a = build_network(1, seed=99)
    b = build_network(1, seed=99)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weights, lb.weights)


def test_different_seeds_differ():
    a = build_network(1, seed=1)
    b = build_network(1, seed=2)
    assert any(
        not np.array_equal(la.weights, lb.weights) for la, lb in zip(a.layers, b.layers)
    )


def test_he_uniform_bounds():
    net = build_network(1, seed=5)
    for layer in net.layers:
        fan_in = layer.in_channels * layer.weights.shape[2] * layer.weights.shape[3]
        bound = np.sqrt(6.0 / fan_in)
        assert np.abs(layer.weights).max() <= bound


def test_build_rejects_bad_channels():
    with pytest.raises(ValueError):
        build_network(0, seed=0)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_preserves_spatial_dims():
    rng = np.random.default_rng(0)
    net = stub_network(rng)
    for h, w in [(1, 1), (3, 7), (8, 8)]:
        x = rng.standard_normal((1, 1, h, w)).astype(np.float32)
        logits, _ = model.forward(net, x)
        assert logits.shape == (1, 1, h, w)


def test_forward_zero_weights_give_zero_logits():
    rng = np.random.default_rng(1)
    net = stub_network(rng)
    for layer in net.layers:
        layer.weights[:] = 0
        layer.bias[:] = 0
    x = rng.standard_normal((1, 1, 6, 6)).astype(np.float32)
    logits, _ = model.forward(net, x)
    assert not logits.any()
    pred = model.predict(net, np.random.default_rng(2).uniform(0, 1, (6, 6)))
    assert np.allclose(pred, 0.5)


def test_forward_equals_hand_chained_convs():
    rng = np.random.default_rng(3)
    net = stub_network(rng)
    x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
    logits, _ = model.forward(net, x)
    manual = tensor.conv2d_forward(tensor.conv2d_forward(x, net.layers[0]), net.layers[1])
    assert np.array_equal(logits, manual)


def test_forward_rejects_channel_mismatch():
    rng = np.random.default_rng(4)
    net = stub_network(rng, in_ch=2)
    with pytest.raises(tensor.ShapeError):
        model.forward(net, rng.standard_normal((1, 1, 4, 4)).astype(np.float32))


def test_forward_deterministic_per_seed():
    x = np.random.default_rng(5).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    a, _ = model.forward(build_network(1, seed=11), x)
    b, _ = model.forward(build_network(1, seed=11), x)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_zero_grad_gives_zero_grads():
    rng = np.random.default_rng(6)
    net = stub_network(rng)
    x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
    logits, cache = model.forward(net, x, keep_cache=True)
    grads = model.backward(net, cache, np.zeros_like(logits))
    for gw, gb in grads:
        assert not gw.any() and not gb.any()


def test_backward_requires_cache():
    rng = np.random.default_rng(7)
    net = stub_network(rng)
    with pytest.raises(ValueError):
        model.backward(net, None, np.zeros((1, 1, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        model.backward(net, [], np.zeros((1, 1, 4, 4), dtype=np.float32))


def test_backward_stub_matches_finite_differences(f64_mode):
    rng = np.random.default_rng(8)
    net = stub_network(rng, hidden=2, dtype=np.float64)
    x = rng.uniform(0, 1, (1, 1, 5, 5))
    target = rng.uniform(0, 1, (1, 1, 5, 5))

    def objective():
        logits, _ = model.forward(net, x)
        return tensor.bce_with_logits(logits, target)[0]

    logits, cache = model.forward(net, x, keep_cache=True)
    _, grad = tensor.bce_with_logits(logits, target)
    grads = model.backward(net, cache, grad)
    for layer, (gw, gb) in zip(net.layers, grads):
        assert_close_rel(gw, finite_diff(objective, layer.weights), rtol=1e-5, atol=1e-9)
        assert_close_rel(gb, finite_diff(objective, layer.bias), rtol=1e-5, atol=1e-9)


def test_dead_relu_path_has_zero_weight_gradient():
    rng = np.random.default_rng(9)
    net = stub_network(rng)
    # drive one hidden unit's pre-activation permanently negative
    dead = 1
    net.layers[0].bias[dead] = -1e3
    x = np.random.default_rng(10).uniform(0, 1, (1, 1, 6, 6)).astype(np.float32)
    logits, cache = model.forward(net, x, keep_cache=True)
    grads = model.backward(net, cache, np.ones_like(logits))
    gw0, gb0 = grads[0]
    assert not gw0[dead].any() and gb0[dead] == 0.0
    assert gw0[0].any()  # live units still learn


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def test_predict_shape_and_open_range():
    rng = np.random.default_rng(11)
    net = stub_network(rng)
    img = rng.uniform(0, 1, (9, 13))
    out = model.predict(net, img)
    assert out.shape == (9, 13)
    assert (out > 0).all() and (out < 1).all()


def test_predict_rejects_out_of_range_input():
    net = stub_network(np.random.default_rng(12))
    with pytest.raises(ValueError):
        model.predict(net, np.full((4, 4), 1.5))


def test_predict_consistent_with_training_path():
    # prediction on a half image equals sigmoid of the training-path logits
    rng = np.random.default_rng(13)
    net = stub_network(rng)
    half = rng.uniform(0, 1, (6, 3)).astype(np.float32)
    logits, _ = model.forward(net, half[None, None])
    assert np.array_equal(model.predict(net, half), tensor.sigmoid(logits[0, 0]))


# ---------------------------------------------------------------------------
# optimizer wiring and checkpoints
# ---------------------------------------------------------------------------


def test_apply_gradients_advances_all_states():
    rng = np.random.default_rng(14)
    net = stub_network(rng)
    x = rng.uniform(0, 1, (1, 1, 5, 5)).astype(np.float32)
    logits, cache = model.forward(net, x, keep_cache=True)
    _, grad = tensor.bce_with_logits(logits, np.full_like(logits, 0.5))
    before = [l.weights.copy() for l in net.layers]
    model.apply_gradients(net, model.backward(net, cache, grad))
    assert all(st_w.t == 1 and st_b.t == 1 for st_w, st_b in net.opt_states)
    assert any(not np.array_equal(b, l.weights) for b, l in zip(before, net.layers))


def test_checkpoint_roundtrip(tmp_path):
    net = build_network(1, seed=21)
    path = tmp_path / "weights.n2f"
    model.save_checkpoint(net, path)
    loaded = model.load_checkpoint(path)
    assert loaded.in_channels == 1
    assert loaded.seed == 21
    assert len(loaded.layers) == len(net.layers)
    for a, b in zip(net.layers, loaded.layers):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)
        assert a.activation == b.activation


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bogus.n2f"
    path.write_bytes(b"XXXX" + b"\0" * 64)
    with pytest.raises(ValueError):
        model.load_checkpoint(path)
