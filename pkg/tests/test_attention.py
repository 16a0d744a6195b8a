import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import direct_attention, loop_additive_scores, np_softmax
from weakts.attention import (AttentionConfig, BahdanauAttention, MultiHeadAttention,
                              ProjectionSet, SelfAttention, attention_mask, luong_attend,
                              multi_head_attend, positional_encoding, self_attention)
from weakts.errors import ConfigurationError, ContractError
from weakts.gradcheck import as_param, check_gradients
from weakts.layers import bilstm_sequence
from weakts.tensor import mul, reduce_sum


class TestConfig:
    def test_even_window_rejected(self):
        with pytest.raises(ConfigurationError):
            AttentionConfig(locality="local", window=4)

    @pytest.mark.parametrize("kw", [{"scoring": "cosine"}, {"locality": "near"}, {"d_k": 0}])
    def test_bad_values(self, kw):
        with pytest.raises(ConfigurationError):
            AttentionConfig(**kw)


class TestSelfAttention:
    def test_single_position_returns_value(self, rng):
        proj = ProjectionSet(4, 3, rng)
        x = rng.normal(size=(1, 4))
        out = self_attention(x, proj, AttentionConfig(d_k=3)).values
        np.testing.assert_allclose(out, x @ proj.W_V.values, atol=1e-15)

    @pytest.mark.parametrize("masked", [False, True])
    def test_zero_query_key_gives_mean_of_values(self, rng, masked):
        proj = ProjectionSet(4, 2, rng)
        proj.W_Q.values[...] = 0.0
        proj.W_K.values[...] = 0.0
        x = rng.normal(size=(5, 4))
        V = x @ proj.W_V.values
        out = self_attention(x, proj, AttentionConfig(d_k=2, masked=masked)).values
        for t in range(5):
            ref = V[:t + 1].mean(axis=0) if masked else V.mean(axis=0)
            np.testing.assert_allclose(out[t], ref, atol=1e-14)

    def test_matches_matrix_formula(self, rng):
        for _ in range(100):
            proj = ProjectionSet(3, 2, rng)
            x = rng.normal(size=(3, 3))
            out = self_attention(x, proj, AttentionConfig(d_k=2)).values
            np.testing.assert_allclose(out, direct_attention(x, proj), rtol=0, atol=1e-12)

    def test_additive_matches_loops(self, rng):
        proj = ProjectionSet(4, 3, rng, additive=True, d_a=5)
        x = rng.normal(size=(4, 4))
        out, w = self_attention(x, proj, AttentionConfig(d_k=3, scoring="additive"), return_weights=True)
        np.testing.assert_allclose(w.values, np_softmax(loop_additive_scores(x, proj)), atol=1e-14)

    def test_additive_needs_parameters(self, rng):
        with pytest.raises(ConfigurationError):
            self_attention(rng.normal(size=(2, 4)), ProjectionSet(4, 2, rng),
                           AttentionConfig(d_k=2, scoring="additive"))

    def test_local_window_restricts_support(self, rng):
        proj = ProjectionSet(3, 2, rng)
        _, w = self_attention(rng.normal(size=(6, 3)), proj,
                              AttentionConfig(d_k=2, locality="local", window=3), return_weights=True)
        off_band = np.abs(np.subtract.outer(np.arange(6), np.arange(6))) > 1
        assert np.all(w.values[off_band] == 0.0)

    @pytest.mark.parametrize("scoring", ["additive", "multiplicative"])
    @pytest.mark.parametrize("T", [1, 2, 4, 7])
    def test_wide_local_window_equals_global(self, rng, scoring, T):
        proj = ProjectionSet(3, 2, rng, additive=scoring == "additive")
        x = rng.normal(size=(2, T, 3))
        glob = self_attention(x, proj, AttentionConfig(d_k=2, scoring=scoring)).values
        loc = self_attention(x, proj, AttentionConfig(d_k=2, scoring=scoring, locality="local",
                                                      window=2 * T - 1)).values
        assert np.array_equal(glob, loc)

    @given(st.integers(1, 6), st.sampled_from([1, 3, 5]), st.booleans(),
           st.sampled_from(["additive", "multiplicative"]), st.integers(0, 10_000))
    def test_weight_rows_are_distributions(self, T, window, masked, scoring, seed):
        rng = np.random.default_rng(seed)
        cfg = AttentionConfig(d_k=2, locality="local", window=window, masked=masked, scoring=scoring)
        proj = ProjectionSet(3, 2, rng, additive=scoring == "additive")
        _, w = self_attention(rng.normal(size=(T, 3)) * 3, proj, cfg, return_weights=True)
        assert np.all(w.values >= 0)
        np.testing.assert_allclose(w.values.sum(axis=-1), 1.0, atol=1e-9)

    def test_mask_never_empties_a_row(self):
        # the diagonal is always allowed, so every valid config keeps one position
        for T in range(1, 6):
            assert attention_mask(T, AttentionConfig(locality="local", window=1, masked=True)).any(axis=1).all()

    @pytest.mark.parametrize("cfg", [
        AttentionConfig(d_k=2),
        AttentionConfig(d_k=2, locality="local", window=3, scoring="additive"),
        AttentionConfig(d_k=2, masked=True),
    ])
    def test_gradients(self, rng, cfg):
        layer = SelfAttention(3, cfg, rng)
        x = as_param(rng.normal(size=(2, 4, 3)))
        G = rng.normal(size=(2, 4, 2))
        r = check_gradients(lambda: reduce_sum(mul(layer(x), G)), [x] + layer.parameters())
        assert r.ok, r.failures


class TestPositionalEncoding:
    def test_first_row_alternates(self):
        assert positional_encoding(3, 6)[0].tolist() == [0.0, 1.0] * 3

    def test_range(self):
        pe = positional_encoding(50, 16)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_closed_form(self):
        np.testing.assert_allclose(positional_encoding(2, 4)[1, :2], [np.sin(1.0), np.cos(1.0)])
        np.testing.assert_allclose(positional_encoding(2, 4)[1, 2:], [np.sin(0.01), np.cos(0.01)])

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigurationError):
            positional_encoding(3, 5)


class TestMultiHead:
    def test_single_head_identity_output_equals_masked_self_attention(self, rng):
        proj = ProjectionSet(4, 4, rng)
        cfg = AttentionConfig(d_k=4, masked=True)
        x = rng.normal(size=(5, 4))
        out = multi_head_attend(x, [proj], np.eye(4), cfg, positional=np.zeros((5, 4))).values
        np.testing.assert_allclose(out, self_attention(x, proj, cfg).values, atol=1e-15)

    def test_composition_oracle(self, rng):
        cfg = AttentionConfig(d_k=2, heads=2, masked=True)
        mha = MultiHeadAttention(4, cfg, rng)
        x = rng.normal(size=(4, 4))
        xp = x + positional_encoding(4, 4)
        causal = np.tril(np.ones((4, 4), dtype=bool))
        heads = []
        for proj in mha.heads:
            Q, K, V = xp @ proj.W_Q.values, xp @ proj.W_K.values, xp @ proj.W_V.values
            S = np.where(causal, Q @ K.T / np.sqrt(2), -1e9)
            heads.append(np_softmax(S) @ V)
        ref = np.concatenate(heads, axis=1) @ mha.W_O.values
        np.testing.assert_allclose(mha(x).values, ref, atol=1e-12)

    def test_future_positions_cannot_leak(self, rng):
        mha = MultiHeadAttention(8, AttentionConfig(heads=4), rng)
        x = rng.normal(size=(6, 8))
        base = mha(x).values
        for t in range(5):
            y = x.copy()
            y[t + 1:] += rng.normal(size=y[t + 1:].shape) * 5
            assert np.array_equal(mha(y).values[:t + 1], base[:t + 1])

    def test_divisibility(self, rng):
        with pytest.raises(ConfigurationError):
            MultiHeadAttention(6, AttentionConfig(heads=4), rng)

    def test_gradients(self, rng):
        mha = MultiHeadAttention(4, AttentionConfig(heads=2), rng)
        x = as_param(rng.normal(size=(2, 3, 4)))
        G = rng.normal(size=(2, 3, 4))
        r = check_gradients(lambda: reduce_sum(mul(mha(x), G)), [x] + mha.parameters())
        assert r.ok, r.failures


class TestLuong:
    def test_two_rows(self, rng):
        enc = rng.normal(size=(2, 5))
        cv = luong_attend(enc)
        assert cv.weights.values.tolist() == [1.0]
        np.testing.assert_array_equal(cv.values.values, enc[0])

    def test_parallel_large_row_dominates(self):
        enc = np.array([[0.0, 1.0], [50.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(luong_attend(enc).weights.values, [0.0, 1.0], atol=1e-12)

    def test_direct_formula(self, rng):
        for _ in range(20):
            enc = rng.normal(size=(4, 3))
            a = np_softmax(enc[:3] @ enc[3])
            cv = luong_attend(enc)
            np.testing.assert_allclose(cv.values.values, a @ enc[:3], rtol=0, atol=1e-12)

    def test_context_in_convex_hull(self, rng):
        enc = rng.normal(size=(3, 5, 2))
        cv = luong_attend(enc)
        w = cv.weights.values
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0)
        lo, hi = enc[:, :4].min(axis=1), enc[:, :4].max(axis=1)
        assert np.all(cv.values.values >= lo - 1e-12) and np.all(cv.values.values <= hi + 1e-12)

    def test_needs_previous_rows(self):
        with pytest.raises(ContractError):
            luong_attend(np.ones((1, 3)))

    def test_gradients(self, rng):
        enc = as_param(rng.normal(size=(2, 4, 3)))
        G = rng.normal(size=(2, 3))
        assert check_gradients(lambda: reduce_sum(mul(luong_attend(enc).values, G)), [enc]).ok


class TestBahdanau:
    def test_two_rows(self, rng):
        att = BahdanauAttention(3, 2, rng)
        assert att(rng.normal(size=(2, 3))).weights.values.tolist() == [1.0]

    def test_zero_lstm_gives_uniform_weights(self, rng):
        att = BahdanauAttention(3, 2, rng)
        for p in att.fwd.parameters() + att.bwd.parameters():
            p.values[...] = 0.0
        np.testing.assert_allclose(att(rng.normal(size=(4, 3))).weights.values, [1 / 3] * 3)

    def test_composition_oracle(self, rng):
        att = BahdanauAttention(3, 2, rng)
        enc = rng.normal(size=(4, 3))
        states = bilstm_sequence(enc, att.fwd, att.bwd).values
        s = att.score
        e = np.array([s.v.values @ np.tanh(s.W1.values @ states[i] + s.W2.values @ states[3])
                      for i in range(3)])
        a = np_softmax(e)
        cv = att(enc)
        np.testing.assert_allclose(cv.weights.values, a, atol=1e-14)
        np.testing.assert_allclose(cv.values.values, a @ states[:3], atol=1e-14)

    def test_needs_previous_rows(self, rng):
        with pytest.raises(ContractError):
            BahdanauAttention(3, 2, rng)(np.ones((1, 3)))

    def test_gradients(self, rng):
        att = BahdanauAttention(2, 2, rng)
        enc = as_param(rng.normal(size=(2, 3, 2)))
        G = rng.normal(size=(2, 4))
        r = check_gradients(lambda: reduce_sum(mul(att(enc).values, G)), [enc] + att.parameters())
        assert r.ok, r.failures
