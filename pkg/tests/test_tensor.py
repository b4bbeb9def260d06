import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepnet import tensor as T
from sepnet.tensor import ConfigError, ShapeError

from conftest import numeric_grad, rel_error


def test_conv_zero_input_gives_zero(rng):
    x = np.zeros((1, 1, 3, 3))
    w = rng.normal(size=(2, 1, 3, 3))
    assert np.all(T.conv2d(x, w, pad=1) == 0)


def test_conv_scalar_scaling():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.conv2d(x, np.array([[[[2.0]]]]))
    np.testing.assert_array_equal(out[0, 0], [[2, 4], [6, 8]])


def test_grouped_conv_matches_block_diagonal_oracle(rng):
    x = rng.normal(size=(2, 8, 6, 6))
    w = rng.normal(size=(8, 2, 3, 3))
    fast = T.conv2d(x, w, pad=1, stride=1, groups=4)
    slow = T.conv2d_direct(x, w, pad=1, stride=1, groups=4)
    np.testing.assert_allclose(fast, slow, atol=1e-10)


def test_grouped_conv_equals_sliced_convs(rng):
    x = rng.normal(size=(2, 12, 7, 7))
    w = rng.normal(size=(6, 4, 3, 3))
    out = T.conv2d(x, w, pad=1, stride=2, groups=3)
    parts = [T.conv2d(x[:, 4 * g:4 * g + 4], w[2 * g:2 * g + 2], pad=1, stride=2) for g in range(3)]
    np.testing.assert_allclose(out, np.concatenate(parts, axis=1), atol=1e-12)


def test_group_output_depends_only_on_its_group(rng):
    x = rng.normal(size=(1, 8, 5, 5))
    w = rng.normal(size=(8, 2, 3, 3))
    base = T.conv2d(x, w, pad=1, groups=4)
    x2 = x.copy()
    x2[:, 6:8] += 10.0  # perturb only group 3
    out = T.conv2d(x2, w, pad=1, groups=4)
    np.testing.assert_array_equal(out[:, :6], base[:, :6])
    assert not np.allclose(out[:, 6:], base[:, 6:])


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 2), cg=st.integers(1, 3), og=st.integers(1, 3), groups=st.integers(1, 3),
    k=st.sampled_from([1, 3, 5]), pad=st.integers(0, 2), stride=st.integers(1, 3),
    h=st.integers(5, 9), seed=st.integers(0, 2**16),
)
def test_conv_matches_direct_oracle(n, cg, og, groups, k, pad, stride, h, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, cg * groups, h, h + 1))
    w = r.normal(size=(og * groups, cg, k, k))
    b = r.normal(size=og * groups)
    np.testing.assert_allclose(T.conv2d(x, w, b, pad, stride, groups),
                               T.conv2d_direct(x, w, b, pad, stride, groups), atol=1e-10)


def test_conv_output_size_formula(rng):
    x = rng.normal(size=(1, 3, 11, 9))
    out = T.conv2d(x, rng.normal(size=(4, 3, 5, 5)), pad=1, stride=2)
    assert out.shape == (1, 4, (11 + 2 - 5) // 2 + 1, (9 + 2 - 5) // 2 + 1)


def test_conv_float32_preserved(rng):
    x = rng.normal(size=(1, 4, 5, 5)).astype(np.float32)
    w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
    assert T.conv2d(x, w, pad=1, groups=2).dtype == np.float32


def test_conv_errors(rng):
    x = rng.normal(size=(1, 6, 5, 5))
    with pytest.raises(ConfigError):
        T.conv2d(x, rng.normal(size=(4, 2, 3, 3)), groups=4)
    with pytest.raises(ShapeError):
        T.conv2d(x, rng.normal(size=(6, 3, 3, 3)), groups=3)
    with pytest.raises(ShapeError):
        T.conv2d(x, rng.normal(size=(2, 6, 7, 7)))


def test_conv_backward_zero_grad(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3))
    gx, gw, gb = T.conv2d_backward(np.zeros((1, 2, 4, 4)), x, w, pad=1)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_scalar_product_rule():
    x = np.array([[[[3.0]]]])
    w = np.array([[[[2.0]]]])
    gx, gw, gb = T.conv2d_backward(np.ones((1, 1, 1, 1)), x, w)
    assert gw.item() == 3.0 and gx.item() == 2.0 and gb.item() == 1.0


def test_conv_backward_shape_mismatch(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3))
    with pytest.raises(ShapeError):
        T.conv2d_backward(np.zeros((1, 2, 3, 3)), x, w, pad=1)


@pytest.mark.parametrize("k,pad,stride,groups", [(3, 1, 1, 1), (3, 1, 2, 2), (1, 0, 1, 4), (5, 1, 2, 1), (1, 1, 2, 2)])
def test_conv_backward_finite_differences(rng, k, pad, stride, groups):
    x = rng.normal(size=(2, 4, 5, 6))
    w = rng.normal(size=(4, 4 // groups, k, k))
    b = rng.normal(size=4)
    proj = rng.normal(size=T.conv2d(x, w, b, pad, stride, groups).shape)

    def loss():
        return float(np.sum(T.conv2d(x, w, b, pad, stride, groups) * proj))

    gx, gw, gb = T.conv2d_backward(proj, x, w, pad, stride, groups)
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
    assert rel_error(gw, numeric_grad(loss, w)) < 1e-4
    assert rel_error(gb, numeric_grad(loss, b)) < 1e-4


def test_relu_and_add():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.add(x, np.zeros_like(x)), x)
    with pytest.raises(ShapeError):
        T.add(x, np.zeros((3, 2)))


def test_batchnorm_train_normalizes_against_direct_statistics(rng):
    x = rng.normal(loc=[3.0, -2.0], scale=[2.0, 0.5], size=(16, 5, 5, 2)).transpose(0, 3, 1, 2)
    rm, rv = np.zeros(2), np.ones(2)
    out, _ = T.batchnorm2d(x, np.ones(2), np.zeros(2), rm, rv, train=True, eps=0.0)
    for c in range(2):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        np.testing.assert_allclose(out[:, c].mean(), 0.0, atol=1e-12)
        np.testing.assert_allclose(out[:, c].var(), 1.0, atol=1e-12)
        np.testing.assert_allclose(out[:, c], (x[:, c] - mu) / np.sqrt(var), atol=1e-10)
    # running stats moved toward the batch statistics
    assert rm[0] > 0 and rm[1] < 0


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.normal(size=(4, 3, 2, 2))
    rm, rv = np.array([1.0, 2.0, 3.0]), np.array([4.0, 1.0, 0.25])
    out, cache = T.batchnorm2d(x, np.ones(3), np.zeros(3), rm, rv, train=False, eps=0.0)
    assert cache is None
    np.testing.assert_allclose(out, (x - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv).reshape(1, 3, 1, 1))


def test_batchnorm_backward_finite_differences(rng):
    x = rng.normal(size=(3, 2, 3, 3))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    proj = rng.normal(size=x.shape)

    def loss():
        out, _ = T.batchnorm2d(x, gamma, beta, np.zeros(2), np.ones(2), train=True)
        return float(np.sum(out * proj))

    _, cache = T.batchnorm2d(x, gamma, beta, np.zeros(2), np.ones(2), train=True)
    gx, gg, gb = T.batchnorm2d_backward(proj, cache, gamma)
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
    assert rel_error(gg, numeric_grad(loss, gamma)) < 1e-4
    assert rel_error(gb, numeric_grad(loss, beta)) < 1e-4


def test_pool_and_linear_backward(rng):
    x = rng.normal(size=(3, 4, 3, 2))
    w, b = rng.normal(size=(5, 4)), rng.normal(size=5)
    proj = rng.normal(size=(3, 5))

    def loss():
        return float(np.sum(T.linear(T.avgpool_global(x), w, b) * proj))

    p = T.avgpool_global(x)
    assert p.shape == (3, 4, 1, 1)
    gp, gw, gb = T.linear_backward(proj, p, w)
    gx = T.avgpool_global_backward(gp, x.shape)
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
    assert rel_error(gw, numeric_grad(loss, w)) < 1e-4
    assert rel_error(gb, numeric_grad(loss, b)) < 1e-4


def test_softmax_and_downsample_backward(rng):
    z = rng.normal(size=(3, 4))
    proj = rng.normal(size=(3, 4))
    g = T.softmax_backward(proj, T.softmax(z))
    assert rel_error(g, numeric_grad(lambda: float(np.sum(T.softmax(z) * proj)), z)) < 1e-4

    x = rng.normal(size=(2, 3, 5, 5))
    proj = rng.normal(size=(2, 6, 3, 3))
    g = T.downsample_pad_backward(proj, x.shape, 2)
    num = numeric_grad(lambda: float(np.sum(T.downsample_pad(x, 2, 6) * proj)), x)
    assert rel_error(g, num) < 1e-4
