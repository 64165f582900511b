"""Layer wrappers: init scaling, padding defaults, running stats, registries."""

import numpy as np
import pytest

from nddr.autodiff import Tensor
from nddr.layers import BatchNorm, Conv2d, Linear, MaxPool, he_uniform, xavier_uniform


def test_he_uniform_bounds_and_determinism():
    rng = np.random.default_rng(0)
    w = he_uniform(rng, (64, 3, 3, 16), 3 * 3 * 16, np.float32)
    limit = np.sqrt(6.0 / (3 * 3 * 16))
    assert np.abs(w).max() <= limit
    assert w.std() > 0.3 * limit  # actually spread out, not collapsed
    w2 = he_uniform(np.random.default_rng(0), (64, 3, 3, 16), 3 * 3 * 16, np.float32)
    np.testing.assert_array_equal(w, w2)


def test_xavier_uniform_bounds():
    rng = np.random.default_rng(1)
    w = xavier_uniform(rng, (8, 1, 1, 24), 24, 8, np.float64)
    assert np.abs(w).max() <= np.sqrt(6.0 / 32)


def test_conv2d_same_padding_default():
    conv = Conv2d(3, 5, kernel=3, rng=np.random.default_rng(2))
    out = conv.forward(Tensor(np.zeros((1, 8, 8, 3), dtype=np.float32)))
    assert out.shape == (1, 8, 8, 5)
    assert conv.pad == 1


def test_conv2d_param_registry_marks_decay():
    conv = Conv2d(2, 3, rng=np.random.default_rng(3))
    reg = {name: decay for name, _, decay in conv.params()}
    assert reg == {"weight": True, "bias": False}
    no_bias = Conv2d(2, 3, bias=False, rng=np.random.default_rng(3))
    assert [name for name, _, _ in no_bias.params()] == ["weight"]


def test_conv2d_1x1_fast_path_matches_general():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 5, 5, 4)).astype(np.float32))
    conv = Conv2d(4, 6, kernel=1, pad=0, rng=np.random.default_rng(5))
    from nddr import ops

    want = ops.conv2d(x, conv.weight, conv.bias)
    np.testing.assert_allclose(conv.forward(x).data, want.data, rtol=1e-6)


def test_linear_shapes():
    lin = Linear(10, 3, rng=np.random.default_rng(6))
    out = lin.forward(Tensor(np.ones((4, 1, 1, 10), dtype=np.float32)))
    assert out.shape == (4, 1, 1, 3)


def test_batch_norm_running_stats_update():
    bn = BatchNorm(2, momentum=0.9)
    rng = np.random.default_rng(7)
    x = rng.normal(3.0, 2.0, size=(8, 4, 4, 2)).astype(np.float32)
    bn.forward(Tensor(x), train=True)
    want_mean = 0.1 * x.mean(axis=(0, 1, 2))
    want_var = 0.9 * 1.0 + 0.1 * x.var(axis=(0, 1, 2))
    np.testing.assert_allclose(bn.running_mean, want_mean, rtol=1e-5)
    np.testing.assert_allclose(bn.running_var, want_var, rtol=1e-5)
    # Eval mode must not move the estimates.
    before = bn.running_mean.copy()
    bn.forward(Tensor(x), train=False)
    np.testing.assert_array_equal(bn.running_mean, before)


def test_batch_norm_identity_mode_is_bitwise():
    bn = BatchNorm(3)
    rng = np.random.default_rng(8)
    # Even with polluted running stats, identity mode ignores them.
    bn.running_mean[:] = 5.0
    bn.running_var[:] = 0.25
    x = rng.normal(size=(2, 4, 4, 3)).astype(np.float32)
    out = bn.forward(Tensor(x), train=False, identity=True)
    assert (out.data == x).all()


def test_batch_norm_identity_mode_respects_learned_affine():
    bn = BatchNorm(1)
    bn.gamma.data[:] = 2.0
    bn.beta.data[:] = -1.0
    out = bn.forward(Tensor(np.ones((1, 1, 2, 1), dtype=np.float32)), train=False, identity=True)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 1), 1.0 * 2.0 - 1.0, dtype=np.float32))


def test_batch_norm_no_affine_registry_empty():
    bn = BatchNorm(4, affine=False)
    assert bn.params() == []
    assert [name for name, _ in bn.buffers()] == ["running_mean", "running_var"]
    out = bn.forward(Tensor(np.random.default_rng(9).normal(size=(4, 2, 2, 4)).astype(np.float32)), train=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)


def test_max_pool_layer_defaults():
    pool = MaxPool(2)
    assert pool.stride == 2
    out = pool.forward(Tensor(np.zeros((1, 6, 6, 2), dtype=np.float32)))
    assert out.shape == (1, 3, 3, 2)


def test_conv_seeded_init_reproducible():
    a = Conv2d(3, 4, rng=np.random.default_rng(42))
    b = Conv2d(3, 4, rng=np.random.default_rng(42))
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    c = Conv2d(3, 4, rng=np.random.default_rng(43))
    assert (a.weight.data != c.weight.data).any()
