import math

import numpy as np
import pytest

from rankvqa import tensor as T
from rankvqa.errors import ConfigError, DimensionError
from rankvqa.layers import (Dropout, FeedForward, Linear, Mlp, MultiHeadAttention, attention,
                            dropout_forward, ffn_forward, mha_forward)
from rankvqa.tensor import Tensor, finite_diff_grad, make_rng, relative_error


def grad_matches(loss_fn, params, tol=1e-4):
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    for p in params:
        numeric = finite_diff_grad(lambda _: loss_fn(), p, 1e-5).data
        assert relative_error(p.grad, numeric) <= tol


class TestLinear:
    def test_fresh_bias_is_zero(self):
        lin = Linear(7, 5, make_rng(0))
        assert lin.weight.shape == (5, 7)
        np.testing.assert_array_equal(lin.bias.data, np.zeros(5))

    def test_same_seed_same_weights(self):
        a = Linear(4, 3, make_rng(11)).weight.data
        b = Linear(4, 3, make_rng(11)).weight.data
        assert a.tobytes() == b.tobytes()

    def test_glorot_variance(self):
        w = Linear(256, 256, make_rng(3)).weight.data
        target = 2.0 / (256 + 256)
        assert abs(w.var() - target) / target < 0.2
        assert np.abs(w).max() <= math.sqrt(6.0 / 512)

    def test_zero_dimension_rejected(self):
        with pytest.raises(DimensionError):
            Linear(0, 3, make_rng(0))

    def test_applies_to_last_axis_of_3d_input(self):
        rng = make_rng(1)
        lin = Linear(4, 2, rng)
        x = rng.standard_normal((3, 5, 4))
        y = lin(Tensor(x)).data
        np.testing.assert_allclose(y, x @ lin.weight.data.T, atol=1e-14)


def test_attention_single_position_returns_v():
    rng = make_rng(0)
    q, k, v = (Tensor(rng.standard_normal((1, 3))) for _ in range(3))
    np.testing.assert_array_equal(attention(q, k, v).data, v.data)


def test_attention_identical_keys_give_uniform_weights():
    rng = make_rng(1)
    q = Tensor(rng.standard_normal((4, 3)))
    k = Tensor(np.tile(rng.standard_normal(3), (4, 1)))
    v = Tensor(rng.standard_normal((4, 3)))
    _, w = attention(q, k, v, return_weights=True)
    np.testing.assert_allclose(w.data, 0.25, atol=1e-15)


def test_attention_hand_instance():
    eye = Tensor(np.eye(2))
    out, w = attention(eye, eye, eye, return_weights=True)
    # scripted: row i scores are [1/sqrt2 if j == i else 0], softmax, times I
    s = 1 / math.sqrt(2)
    hi = math.exp(s) / (math.exp(s) + 1.0)
    lo = 1.0 / (math.exp(s) + 1.0)
    expected = np.array([[hi, lo], [lo, hi]])
    np.testing.assert_allclose(w.data, expected, atol=1e-12, rtol=0)
    np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)


def test_attention_shape_mismatch():
    with pytest.raises(DimensionError):
        attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))))


class TestMultiHeadAttention:
    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 3, make_rng(0))

    def test_length_one_is_wo_of_wv(self):
        rng = make_rng(2)
        mha = MultiHeadAttention(8, 4, rng)
        x = Tensor(rng.standard_normal((1, 8)))
        expected = mha.w_o(mha.w_v(x)).data
        assert mha_forward(x, mha).data.tobytes() == expected.tobytes()

    def test_length_one_ignores_query_and_key_weights(self):
        rng = make_rng(3)
        mha = MultiHeadAttention(8, 2, rng)
        x = Tensor(rng.standard_normal((1, 8)))
        before = mha(x).data.copy()
        mha.w_q.weight.data = rng.standard_normal((8, 8)) * 50
        mha.w_k.bias.data = rng.standard_normal(8) * 50
        np.testing.assert_array_equal(mha(x).data, before)

    def test_single_head_is_plain_attention(self):
        rng = make_rng(4)
        mha = MultiHeadAttention(6, 1, rng)
        x = Tensor(rng.standard_normal((5, 6)))
        ref = mha.w_o(attention(mha.w_q(x), mha.w_k(x), mha.w_v(x)))
        np.testing.assert_allclose(mha(x).data, ref.data, atol=1e-14)

    def test_head_rows_sum_to_one(self):
        rng = make_rng(5)
        mha = MultiHeadAttention(12, 3, rng)
        _, weights = mha(Tensor(rng.standard_normal((2, 5, 12)) * 3), return_weights=True)
        assert len(weights) == 3
        for w in weights:
            np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12, rtol=0)

    def test_permutation_equivariant(self):
        rng = make_rng(6)
        mha = MultiHeadAttention(8, 2, rng)
        x = rng.standard_normal((5, 8))
        perm = rng.permutation(5)
        np.testing.assert_allclose(mha(Tensor(x[perm])).data, mha(Tensor(x)).data[perm], atol=1e-12)

    def test_heads_use_contiguous_column_slices(self):
        rng = make_rng(7)
        mha = MultiHeadAttention(4, 2, rng)
        x = Tensor(rng.standard_normal((3, 4)))
        q, k, v = mha.w_q(x).data, mha.w_k(x).data, mha.w_v(x).data
        heads = []
        for lo in (0, 2):
            s = q[:, lo:lo + 2] @ k[:, lo:lo + 2].T / math.sqrt(2)
            e = np.exp(s - s.max(1, keepdims=True))
            heads.append((e / e.sum(1, keepdims=True)) @ v[:, lo:lo + 2])
        ref = np.hstack(heads) @ mha.w_o.weight.data.T + mha.w_o.bias.data
        np.testing.assert_allclose(mha(x).data, ref, atol=1e-13)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        rng = make_rng((seed, 5))
        mha = MultiHeadAttention(6, 2, rng)
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        grad_matches(lambda: T.tsum(mha(x)), [x, *mha.parameters()])


class TestFeedForward:
    def test_zero_weights_give_zero(self):
        ffn = FeedForward(4, 6, make_rng(0))
        for p in ffn.parameters():
            p.data = np.zeros_like(p.data)
        np.testing.assert_array_equal(ffn(Tensor(np.ones((3, 4)))).data, 0.0)

    def test_identity_weights_pass_nonnegative_input(self):
        ffn = FeedForward(3, 3, make_rng(0))
        ffn.w1.weight.data = np.eye(3)
        ffn.w2.weight.data = np.eye(3)
        x = np.abs(make_rng(1).standard_normal((2, 3)))
        np.testing.assert_array_equal(ffn_forward(Tensor(x), ffn).data, x)

    def test_gradients(self):
        rng = make_rng(2)
        ffn = FeedForward(5, 7, rng)
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        grad_matches(lambda: T.tsum(T.mul(ffn(x), ffn(x))), [x, *ffn.parameters()])

    def test_shape_preserved(self):
        ffn = FeedForward(5, 9, make_rng(0))
        assert ffn(Tensor(np.ones((2, 3, 5)))).shape == (2, 3, 5)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(make_rng(0).standard_normal(50))
        assert dropout_forward(x, Dropout(0.5), make_rng(1), training=False) is x

    def test_rate_zero_is_identity(self):
        x = Tensor(make_rng(0).standard_normal(50))
        np.testing.assert_array_equal(dropout_forward(x, Dropout(0.0), make_rng(1)).data, x.data)

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            Dropout(1.0)

    def test_inverted_scaling_preserves_mean(self):
        out = dropout_forward(Tensor(np.ones(100_000)), Dropout(0.5), make_rng(9)).data
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) == {0.0, 2.0}


def test_mlp_final_layer_has_no_activation():
    rng = make_rng(0)
    mlp = Mlp(4, [6, 5], 3, 0.5, rng)
    assert [(l.in_features, l.out_features) for l in mlp.layers] == [(4, 6), (6, 5), (5, 3)]
    mlp.layers[-1].bias.data = np.array([-5.0, -6.0, -7.0])
    mlp.layers[-1].weight.data[:] = 0.0
    np.testing.assert_array_equal(mlp(Tensor(np.ones((2, 4)))).data, [[-5, -6, -7]] * 2)
