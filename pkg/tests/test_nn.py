import numpy as np
import pytest

from vaemmd import autodiff as ad
from vaemmd import nn

from oracles import check_grads


def rand(shape, seed, scale=1.0):
    g = np.random.Generator(np.random.Philox(seed))
    return g.standard_normal(shape) * scale


# ----------------------------------------------------------------------
# conv3d
# ----------------------------------------------------------------------

def test_conv3d_identity_kernel():
    x = ad.Tensor(np.ones((1, 1, 4, 4, 4)))
    w = ad.Tensor(np.full((1, 1, 1, 1, 1), 2.0))
    b = ad.Tensor(np.zeros(1))
    out = nn.conv3d(x, w, b, stride=1, padding=0)
    assert out.shape == (1, 1, 4, 4, 4)
    assert np.all(out.data == 2.0)


def test_conv3d_halving_ladder_reaches_8():
    # k=4, s=2, p=1 halves each spatial side: 128 -> 64 -> 32 -> 16 -> 8
    side = 128
    for _ in range(4):
        side = (side + 2 * 1 - 4) // 2 + 1
    assert side == 8
    x = ad.Tensor(np.zeros((1, 1, 16, 16, 16), dtype=np.float32))
    w = ad.Tensor(np.zeros((2, 1, 4, 4, 4), dtype=np.float32))
    out = nn.conv3d(x, w, stride=2, padding=1)
    assert out.shape == (1, 2, 8, 8, 8)


def test_conv3d_channel_mismatch_names_dimension():
    x = ad.Tensor(np.zeros((1, 3, 4, 4, 4)))
    w = ad.Tensor(np.zeros((2, 2, 3, 3, 3)))
    with pytest.raises(ad.ShapeError, match="channel"):
        nn.conv3d(x, w)


def test_conv3d_kernel_too_large():
    x = ad.Tensor(np.zeros((1, 1, 2, 2, 2)))
    w = ad.Tensor(np.zeros((1, 1, 3, 3, 3)))
    with pytest.raises(ad.ShapeError, match="depth"):
        nn.conv3d(x, w)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv3d_grad_check(stride, padding):
    x = rand((2, 2, 4, 4, 4), 1)
    w = rand((3, 2, 2, 2, 2), 2)
    b = rand((3,), 3)
    check_grads(
        lambda xx, ww, bb: (nn.conv3d(xx, ww, bb, stride=stride, padding=padding) ** 2).sum(),
        [x, w, b],
    )


# ----------------------------------------------------------------------
# conv_transpose3d
# ----------------------------------------------------------------------

def test_conv_transpose_shape_rule():
    x = ad.Tensor(np.zeros((1, 2, 8, 8, 8), dtype=np.float32))
    w = ad.Tensor(np.zeros((2, 1, 4, 4, 4), dtype=np.float32))
    out = nn.conv_transpose3d(x, w, stride=2, padding=1)
    assert out.shape == (1, 1, 16, 16, 16)


def test_conv_transpose_adjoint_identity():
    g = np.random.Generator(np.random.Philox(7))
    x = ad.Tensor(g.standard_normal((2, 2, 5, 5, 5)))
    w = ad.Tensor(g.standard_normal((3, 2, 3, 3, 3)))
    y_shape = nn.conv3d(x, w, stride=2, padding=1).shape
    y = ad.Tensor(g.standard_normal(y_shape))
    lhs = float((nn.conv3d(x, w, stride=2, padding=1).data * y.data).sum())
    rhs = float((x.data * nn.conv_transpose3d(y, w, stride=2, padding=1).data).sum())
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
def test_conv_transpose_grad_check(stride, padding):
    x = rand((1, 3, 3, 3, 3), 11)
    w = rand((3, 2, 2, 2, 2), 12)
    b = rand((2,), 13)
    check_grads(
        lambda xx, ww, bb: (nn.conv_transpose3d(xx, ww, bb, stride=stride, padding=padding) ** 2).sum(),
        [x, w, b],
    )


# ----------------------------------------------------------------------
# batch norm
# ----------------------------------------------------------------------

def test_batch_norm_train_normalizes():
    x = ad.Tensor(rand((4, 3, 4, 4, 4), 20, 5.0) + 2.0)
    stats = nn.RunningStats(3, dtype=np.float64)
    out = nn.batch_norm3d(x, ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)), stats, "train", eps=1e-12)
    per_channel = out.data.transpose(1, 0, 2, 3, 4).reshape(3, -1)
    assert np.allclose(per_channel.mean(axis=1), 0.0, atol=1e-6)
    assert np.allclose(per_channel.var(axis=1), 1.0, atol=1e-6)


def test_batch_norm_constant_channel_is_zero():
    x = ad.Tensor(np.full((2, 1, 3, 3, 3), 7.0))
    stats = nn.RunningStats(1)
    out = nn.batch_norm3d(x, ad.Tensor(np.ones(1)), ad.Tensor(np.zeros(1)), stats, "train", eps=1e-5)
    assert np.allclose(out.data, 0.0)


def test_batch_norm_single_element_errors():
    x = ad.Tensor(np.zeros((1, 2, 1, 1, 1)))
    stats = nn.RunningStats(2)
    with pytest.raises(ad.ShapeError):
        nn.batch_norm3d(x, ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), stats, "train")


def test_batch_norm_eval_uses_running_stats():
    stats = nn.RunningStats(1, dtype=np.float64)
    stats.mean[:] = 2.0
    stats.var[:] = 4.0
    x = ad.Tensor(np.full((1, 1, 2, 2, 2), 4.0))
    out = nn.batch_norm3d(x, ad.Tensor(np.ones(1)), ad.Tensor(np.zeros(1)), stats, "eval", eps=0.0)
    assert np.allclose(out.data, 1.0)
    assert stats.mean[0] == 2.0  # eval mode never updates


def test_batch_norm_grad_check():
    x = rand((3, 2, 2, 2, 2), 21)
    gamma = rand((2,), 22) + 2.0
    beta = rand((2,), 23)

    def build(xx, gg, bb):
        stats = nn.RunningStats(2, dtype=np.float64)
        return (nn.batch_norm3d(xx, gg, bb, stats, "train") ** 2).sum()

    check_grads(build, [x, gamma, beta])


# ----------------------------------------------------------------------
# linear / dropout
# ----------------------------------------------------------------------

def test_linear_identity():
    x = rand((3, 4), 30)
    out = nn.linear(ad.Tensor(x), ad.Tensor(np.eye(4)), ad.Tensor(np.zeros(4)))
    assert np.allclose(out.data, x)


def test_linear_bottleneck_flatten_dimension():
    # paper-scale bottleneck: 256 channels at 8^3 flattens to 131072 features
    assert 256 * 8 * 8 * 8 == 131072


def test_linear_shape_error():
    with pytest.raises(ad.ShapeError):
        nn.linear(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))


def test_linear_grad_check():
    check_grads(
        lambda x, w, b: (nn.linear(x, w, b) ** 2).sum(),
        [rand((3, 4), 31), rand((2, 4), 32), rand((2,), 33)],
    )


def test_dropout_eval_identity():
    x = ad.Tensor(rand((10, 10), 40))
    out = nn.dropout(x, 0.5, "eval", seed=0)
    assert np.array_equal(out.data, x.data)


def test_dropout_rate_zero_identity():
    x = ad.Tensor(rand((10, 10), 41))
    out = nn.dropout(x, 0.0, "train", seed=0)
    assert np.array_equal(out.data, x.data)


def test_dropout_rate_one_rejected():
    with pytest.raises(ValueError):
        nn.dropout(ad.Tensor(np.zeros(3)), 1.0, "train", seed=0)


def test_dropout_survivor_fraction():
    x = ad.Tensor(np.ones(100_000))
    out = nn.dropout(x, 0.1, "train", seed=5)
    survivors = np.count_nonzero(out.data) / x.size
    assert abs(survivors - 0.9) < 0.01


def test_dropout_reproducible_from_seed():
    x = ad.Tensor(rand((50, 50), 42))
    a = nn.dropout(x, 0.3, "train", seed=9).data
    b = nn.dropout(x, 0.3, "train", seed=9).data
    assert np.array_equal(a, b)


# ----------------------------------------------------------------------
# composed block (encoder-style) grad check
# ----------------------------------------------------------------------

def test_composed_block_grad_check():
    x = rand((2, 1, 4, 4, 4), 50)
    w1 = rand((2, 1, 4, 4, 4), 51, 0.5)
    b1 = rand((2,), 52)
    w2 = rand((2, 2, 3, 3, 3), 53, 0.3)
    b2 = rand((2,), 54)

    def build(xx, ww1, bb1, ww2, bb2):
        h = ad.relu(nn.conv3d(xx, ww1, bb1, stride=2, padding=1))
        h = ad.relu(nn.conv3d(h, ww2, bb2, stride=1, padding=1) + h)
        return (h * h).sum()

    check_grads(build, [x, w1, b1, w2, b2])
