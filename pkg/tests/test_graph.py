import numpy as np
import pytest

from sepnet import tensor as T
from sepnet.compress import binarize_network
from sepnet.graph import GraphError, Network, ParamSlot, UsageError, cross_entropy_softmax
from sepnet.tensor import ShapeError
from sepnet.train import TrainConfig, sgd_step

from conftest import numeric_grad, rel_error


def small_net(dtype=np.float64):
    net = Network("t", (4, 6, 6), class_count=3)
    net.dtype = np.dtype(dtype)
    x = net.conv("c1", "input", 4, 4, 3, pad=1, groups=2)
    x = net.bn("b1", x, 4)
    x = net.relu("r1", x)
    y = net.conv("c2", x, 4, 4, 1)
    s = net.add("Add", "sum", [y, "input"])
    p = net.add("GlobalAvgPool", "pool", s)
    net.add("Linear", "fc", p, in_features=4, out_features=3)
    return net.initialize(7)


def test_single_relu_net():
    net = Network("relu", (2, 1, 1))
    net.relu("r", "input")
    out = net.forward(np.array([-2.0, 3.0]).reshape(1, 2, 1, 1))
    np.testing.assert_array_equal(out.ravel(), [0, 3])


def test_identity_conv_net(rng):
    net = Network("id", (3, 4, 4))
    net.conv("c", "input", 3, 3, 1)
    net.weight_slot("c").value = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(x), x)


def test_forward_matches_composed_ops(rng):
    net = Network("comp", (3, 5, 5))
    net.conv("c", "input", 3, 6, 3, pad=1, groups=3)
    net.relu("r", "c")
    net.add("GlobalAvgPool", "p", "r")
    net.initialize(3)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = net.weight_slot("c").value
    expect = T.avgpool_global(T.relu(T.conv2d_direct(x, w, pad=1, groups=3)))
    np.testing.assert_allclose(net.forward(x), expect, atol=1e-5)


def test_eval_forward_is_bitwise_deterministic(rng):
    net = small_net(np.float32)
    x = rng.normal(size=(3, 4, 6, 6)).astype(np.float32)
    net.forward(x, train=True)  # move running stats off their defaults
    a = net.forward(x)
    b = net.forward(x)
    assert a.tobytes() == b.tobytes()


def test_validation_errors():
    net = Network("bad", (3, 8, 8))
    with pytest.raises(GraphError):
        net.add("ReLU", "r", "nope")
    net.conv("c", "input", 4, 4, 3, pad=1)  # declared 4 input channels, input has 3
    with pytest.raises(GraphError):
        net.validate()
    net2 = Network("add", (3, 8, 8))
    net2.conv("c", "input", 3, 4, 1)
    net2.add("Add", "a", ["c", "input"])
    with pytest.raises(GraphError):
        net2.validate()


def test_input_shape_checked():
    net = small_net()
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 6, 6)))


def test_backward_without_forward():
    net = small_net()
    with pytest.raises(UsageError):
        net.backward(np.zeros((1, 3)))
    net.forward(np.zeros((1, 4, 6, 6)))  # eval mode keeps no cache
    with pytest.raises(UsageError):
        net.backward(np.zeros((1, 3)))


def test_unused_parameter_gets_exact_zero(rng):
    net = Network("branch", (2, 3, 3))
    net.conv("used", "input", 2, 2, 1)
    net.conv("unused", "input", 2, 2, 3, pad=1)
    net.add("ReLU", "out", "used")
    net.initialize(0)
    net.forward(rng.normal(size=(2, 2, 3, 3)), train=True)
    grads = net.backward(np.ones((2, 2, 3, 3)))
    assert not grads["unused.weight"].any()
    assert grads["used.weight"].any()


def test_single_conv_quadratic_loss_gradient(rng):
    net = Network("q", (2, 4, 4))
    net.dtype = np.dtype(np.float64)
    net.conv("c", "input", 2, 3, 3, pad=1, bias=True)
    net.initialize(1)
    x = rng.normal(size=(2, 2, 4, 4))

    def loss():
        return 0.5 * float(np.sum(net.forward(x) ** 2))

    out = net.forward(x, train=True)
    grads = net.backward(out)
    for key in ("c.weight", "c.bias"):
        num = numeric_grad(loss, net.params[key].value)
        assert rel_error(grads[key], num) < 1e-4


def test_full_graph_gradients_float64(rng):
    net = small_net()
    x = rng.normal(size=(4, 4, 6, 6))
    labels = np.array([0, 2, 1, 2])

    def loss():
        return cross_entropy_softmax(net.forward(x, train=True), labels)[0]

    logits = net.forward(x, train=True)
    _, g = cross_entropy_softmax(logits, labels)
    grads = net.backward(g)
    for key, slot in net.params.items():
        num = numeric_grad(loss, slot.value)
        assert rel_error(grads[key], num) < 1e-4, key


def test_frozen_pattern_gradient_and_step(rng):
    net = small_net(np.float32)
    bnet, _ = binarize_network(net, "k>1")
    slot = bnet.weight_slot("c1")
    assert slot.frozen_pattern and slot.encoding == "BIN1"
    signs_before = slot.pattern.signs.copy()
    x = rng.normal(size=(4, 4, 6, 6)).astype(np.float32)
    state = {}
    cfg = TrainConfig(base_lr=0.5, momentum=0.9, weight_decay=1e-3, max_iter=10)
    for it in range(5):
        logits = bnet.forward(x, train=True)
        _, g = cross_entropy_softmax(logits, np.array([0, 1, 2, 0]))
        grads = bnet.backward(g)
        assert grads["c1.weight"].shape == (4,)  # one degree of freedom per filter
        sgd_step(bnet.params, grads, state, cfg, it)
    np.testing.assert_array_equal(slot.pattern.signs, signs_before)
    w = slot.value
    alpha = slot.pattern.alpha.reshape(-1, 1, 1, 1)
    np.testing.assert_allclose(np.abs(w), np.broadcast_to(alpha, w.shape), rtol=1e-6)
    assert np.all(np.sign(w)[~signs_before] <= 0)


def test_frozen_flag_requires_bin1():
    with pytest.raises(ValueError):
        ParamSlot("c", "weight", np.zeros(3), encoding="F32", frozen_pattern=True)


def test_cross_entropy_values(rng):
    loss, _ = cross_entropy_softmax(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(np.log(7))
    logits = np.full((2, 4), -50.0)
    logits[[0, 1], [1, 2]] = 50.0
    loss, _ = cross_entropy_softmax(logits, np.array([1, 2]))
    assert loss < 1e-30
    with pytest.raises(ValueError):
        cross_entropy_softmax(np.zeros((2, 3)), np.array([0, 3]))


def test_cross_entropy_gradient(rng):
    z = rng.normal(size=(4, 10))
    y = np.array([1, 5, 9, 0])
    _, g = cross_entropy_softmax(z, y)
    num = numeric_grad(lambda: cross_entropy_softmax(z, y)[0], z)
    assert rel_error(g, num) < 1e-4


def test_description_roundtrip():
    net = small_net(np.float32)
    again = Network.from_description(net.describe())
    assert again.describe() == net.describe()
    assert list(again.params) == list(net.params)
