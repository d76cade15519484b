import numpy as np
import pytest

from lcf_atepc import numerics as nx
from lcf_atepc.encoder import MHSA, Encoder, EncoderConfig
from lcf_atepc.numerics import ParameterStore


def make_encoder(d_h=8, heads=2, layers=2, vocab=10, n=7, seed=0, prefix="enc"):
    store = ParameterStore(seed=seed)
    return store, Encoder(store, prefix, EncoderConfig(d_h, heads, layers, vocab, n))


IDS = np.array([[1, 4, 5, 6, 2, 0, 0], [1, 7, 2, 0, 0, 0, 0]])
VALID = IDS != 0


class TestConfig:
    def test_d_k(self):
        assert EncoderConfig(d_h=64, heads=4).d_k == 16

    @pytest.mark.parametrize("kw", [dict(d_h=10, heads=4), dict(heads=0), dict(layers=-1), dict(vocab_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EncoderConfig(**kw)


class TestMHSA:
    def test_output_shape_and_range(self):
        store = ParameterStore()
        mhsa = MHSA(store, "m", 8, 4)
        x = np.random.default_rng(0).normal(size=(2, 7, 8))
        out = mhsa(x, VALID).value
        assert out.shape == (2, 7, 8)
        assert np.all(np.abs(out) < 1)

    def test_per_head_parameters(self):
        store = ParameterStore()
        MHSA(store, "m", 8, 2)
        assert store.names() == ["m.head0.wq", "m.head1.wq", "m.head0.wk", "m.head1.wk",
                                 "m.head0.wv", "m.head1.wv", "m.wmh"]
        assert store["m.head0.wq"].value.shape == (8, 4)

    def test_attention_rows_sum_to_one_and_skip_padding(self):
        store = ParameterStore()
        mhsa = MHSA(store, "m", 8, 2)
        x = np.random.default_rng(1).normal(size=(2, 7, 8))
        _, attn = mhsa.sda(x, 1, VALID, return_attention=True)
        a = attn.value
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(a[0][:, ~VALID[0]] == 0.0)
        assert np.all(a[1][:, ~VALID[1]] == 0.0)

    def test_padding_content_does_not_leak(self):
        store = ParameterStore()
        mhsa = MHSA(store, "m", 8, 2)
        x = np.random.default_rng(2).normal(size=(1, 7, 8))
        y = x.copy()
        y[0, ~VALID[0]] += 5.0
        a, b = mhsa(x, VALID[:1]).value, mhsa(y, VALID[:1]).value
        np.testing.assert_array_equal(a[0, VALID[0]], b[0, VALID[0]])

    def test_permutation_equivariant_without_positions(self):
        store = ParameterStore(seed=3)
        mhsa = MHSA(store, "m", 8, 2)
        x = np.random.default_rng(3).normal(size=(5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(mhsa(x[perm]).value, mhsa(x).value[perm], atol=1e-14)

    def test_single_head(self):
        store = ParameterStore()
        out = MHSA(store, "m", 6, 1)(np.ones((3, 6)))
        assert out.value.shape == (3, 6)

    def test_width_mismatch(self):
        mhsa = MHSA(ParameterStore(), "m", 8, 2)
        with pytest.raises(nx.ShapeError):
            mhsa(np.ones((3, 6)))


class TestEncoder:
    def test_shape(self):
        _, enc = make_encoder()
        assert enc(IDS, VALID).value.shape == (2, 7, 8)

    def test_zero_layers_is_embedding(self):
        _, enc = make_encoder(layers=0)
        np.testing.assert_array_equal(enc(IDS, VALID).value, enc.embed(IDS).value)

    def test_position_embedding_matters(self):
        store, enc = make_encoder()
        out = enc(np.array([[4, 4, 4]])).value
        assert not np.allclose(out[0, 0], out[0, 1])
        store["enc.pos_emb"].value[:] = 0.0
        out = enc(np.array([[4, 4, 4]])).value
        np.testing.assert_allclose(out[0, 0], out[0, 1], atol=1e-15)

    def test_equivariance_with_zeroed_positions(self):
        store, enc = make_encoder(seed=5)
        store["enc.pos_emb"].value[:] = 0.0
        ids = np.array([1, 4, 5, 6, 2])
        perm = np.array([2, 4, 0, 1, 3])
        np.testing.assert_allclose(enc(ids[perm]).value, enc(ids).value[perm], atol=1e-14)

    def test_too_long(self):
        _, enc = make_encoder(n=4)
        with pytest.raises(nx.ShapeError):
            enc(np.ones((1, 5), dtype=int))

    def test_local_and_global_differ_at_same_seed(self):
        store = ParameterStore(seed=0)
        cfg = EncoderConfig(8, 2, 1, 10, 7)
        local, glob = Encoder(store, "local", cfg), Encoder(store, "global", cfg)
        assert not np.allclose(local(IDS, VALID).value, glob(IDS, VALID).value)

    def test_deterministic(self):
        a = make_encoder(seed=4)[1](IDS, VALID).value
        b = make_encoder(seed=4)[1](IDS, VALID).value
        np.testing.assert_array_equal(a, b)

    def test_gradients(self):
        store, enc = make_encoder(d_h=4, heads=2, layers=2, n=5, vocab=8)
        ids = np.array([[1, 4, 5, 2, 0]])
        proj = np.random.default_rng(0).normal(size=(1, 5, 4))
        report = nx.finite_difference_check(
            lambda: nx.sum_all(nx.hadamard_rows(enc(ids, ids != 0), proj)), store, samples=150)
        assert report.passed, report.worst()


class TestSdaExamples:
    def test_single_position_returns_value_row(self):
        store = ParameterStore(seed=1)
        mhsa = MHSA(store, "m", 4, 2)
        x = np.random.default_rng(0).normal(size=(1, 4))
        out = mhsa.sda(x, 0).value
        np.testing.assert_allclose(out, x @ store["m.head0.wv"].value, atol=1e-15)

    def test_identical_rows_give_uniform_attention(self):
        mhsa = MHSA(ParameterStore(), "m", 4, 2)
        x = np.tile(np.random.default_rng(0).normal(size=(1, 4)), (5, 1))
        valid = np.array([True, True, True, True, False])
        _, attn = mhsa.sda(x, 1, valid, return_attention=True)
        np.testing.assert_allclose(attn.value[:, :4], 0.25, atol=1e-12)

    def test_one_head_reduces_to_single_sda(self):
        store = ParameterStore(seed=2)
        mhsa = MHSA(store, "m", 4, 1)
        x = np.random.default_rng(1).normal(size=(3, 4))
        expected = np.tanh(mhsa.sda(x, 0).value @ store["m.wmh"].value)
        np.testing.assert_allclose(mhsa(x).value, expected, atol=1e-15)

    def test_pad_rows_constant_across_batch(self):
        _, enc = make_encoder(layers=0)
        emb = enc.embed(IDS).value
        np.testing.assert_array_equal(emb[0, 6], emb[1, 6])
