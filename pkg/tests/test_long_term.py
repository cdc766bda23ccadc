import numpy as np
import pytest

from sanmove.src import autodiff as ad
from sanmove.src.autodiff import Tensor, grad_check
from sanmove.src.embeddings import EmbeddingTables, time_encoding
from sanmove.src.errors import ShapeError
from sanmove.src.long_term import (
    AttentionBlockParams,
    attention,
    attention_with_weights,
    build_queries,
    ffn,
    long_term_forward,
)


def np_softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@pytest.fixture
def qkv(rng):
    return tuple(Tensor(rng.normal(size=(5, 4))) for _ in range(3))


class TestAttention:
    def test_matches_closed_form(self, qkv):
        q, k, v = qkv
        expected = np_softmax(q.data @ k.data.T / 2.0) @ v.data
        np.testing.assert_allclose(attention(q, k, v).data, expected, atol=1e-12)

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b = rng.integers(1, 7, size=2)
            d = 2 * int(rng.integers(1, 4))
            q, k, v = Tensor(rng.normal(size=(a, d))), Tensor(rng.normal(size=(b, d))), Tensor(rng.normal(size=(b, d)))
            _, weights = attention_with_weights(q, k, v, n_heads=2)
            for w in weights:
                np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)

    def test_causal_mask(self, qkv):
        q, k, v = qkv
        _, (w,) = attention_with_weights(q, k, v, mask=np.tril(np.ones((5, 5), dtype=bool)))
        assert (np.triu(w.data, 1) == 0.0).all()
        np.testing.assert_allclose(w.data[0], [1, 0, 0, 0, 0])

    def test_heads_split_the_width(self, qkv):
        q, k, v = qkv
        out = attention(q, k, v, n_heads=2).data
        for h in range(2):
            cols = slice(2 * h, 2 * h + 2)
            expected = np_softmax(q.data[:, cols] @ k.data[:, cols].T / np.sqrt(2)) @ v.data[:, cols]
            np.testing.assert_allclose(out[:, cols], expected, atol=1e-12)

    def test_gamma_on_logits(self, qkv, rng):
        q, k, v = qkv
        gamma = rng.uniform(0.1, 1.0, size=(5, 5))
        _, (w,) = attention_with_weights(q, k, v, gamma=gamma)
        expected = np_softmax(gamma * (q.data @ k.data.T) / 2.0)
        np.testing.assert_allclose(w.data, expected, atol=1e-12)

    def test_gamma_on_weights(self, qkv, rng):
        q, k, v = qkv
        gamma = rng.uniform(0.1, 1.0, size=(5, 5))
        _, (w,) = attention_with_weights(q, k, v, gamma=gamma, gamma_placement="weights")
        raw = np_softmax(q.data @ k.data.T / 2.0) * gamma
        np.testing.assert_allclose(w.data, raw / raw.sum(axis=1, keepdims=True), atol=1e-12)

    def test_unit_gamma_is_neutral(self, qkv):
        q, k, v = qkv
        plain = attention(q, k, v).data
        scaled, _ = attention_with_weights(q, k, v, gamma=np.ones((5, 5)))
        np.testing.assert_allclose(scaled.data, plain, atol=1e-12)

    def test_dominant_logit_selects_its_value_row(self, rng):
        v = Tensor(rng.normal(size=(4, 2)))
        q = Tensor(np.array([[1.0, 0.0]]))
        k = Tensor(np.array([[0.0, 0.0], [0.0, 0.0], [50.0 * np.sqrt(2), 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(attention(q, k, v).data[0], v.data[2], atol=1e-9)

    def test_errors(self, qkv):
        q, k, v = qkv
        with pytest.raises(ShapeError):
            attention(q, Tensor(np.ones((5, 3))), v)
        with pytest.raises(ShapeError):
            attention(q, k, v, n_heads=3)
        with pytest.raises(ValueError):
            attention(q, k, v, mask=np.zeros((5, 5), dtype=bool))
        with pytest.raises(ValueError):
            attention_with_weights(q, k, v, gamma=np.ones((5, 5)), gamma_placement="values")


class TestLongTerm:
    @pytest.fixture
    def setup(self, rng):
        tables = EmbeddingTables.initialize(2, 6, 8, rng, init_std=0.5)
        blocks = [AttentionBlockParams.initialize(8, rng, "long_term.0", init_std=0.5)]
        return tables, blocks

    def test_single_layer_closed_form(self, setup):
        tables, (block,) = setup
        locations, slots = np.array([1, 3, 3, 6]), np.array([0, 5, 30, 47])
        h = long_term_forward([block], tables, 1, locations, slots)

        x_q = tables.user.data[1] + np.stack([time_encoding(int(s), 8) for s in slots])
        x_kv = tables.location.data[locations]
        y = np_softmax((x_q @ block.w_q.data) @ (x_kv @ block.w_k.data).T / np.sqrt(8)) @ (x_kv @ block.w_v.data)
        f = np.maximum(y @ block.w1.data + block.b1.data, 0.0) @ block.w2.data + block.b2.data
        assert h.shape == (8,)
        np.testing.assert_allclose(h.data, f.mean(axis=0), atol=1e-12)

    def test_history_is_truncated_to_the_most_recent(self, setup, rng):
        tables, blocks = setup
        locations = rng.integers(1, 7, size=20)
        slots = rng.integers(0, 48, size=20)
        full = long_term_forward(blocks, tables, 0, locations, slots, l_max=8)
        recent = long_term_forward(blocks, tables, 0, locations[-8:], slots[-8:], l_max=8)
        np.testing.assert_array_equal(full.data, recent.data)

    def test_stacked_layers(self, rng):
        tables = EmbeddingTables.initialize(1, 4, 8, rng, init_std=0.5)
        blocks = [AttentionBlockParams.initialize(8, rng, f"long_term.{i}", init_std=0.5) for i in range(3)]
        h = long_term_forward(blocks, tables, 0, [1, 2, 3], [4, 5, 6], n_heads=2)
        assert h.shape == (8,)
        assert np.isfinite(h.data).all()

    def test_empty_history(self, setup):
        tables, blocks = setup
        with pytest.raises(ValueError):
            long_term_forward(blocks, tables, 0, [], [])

    def test_gradients(self, setup, rng):
        tables, (block,) = setup
        readout = rng.normal(size=8)

        def f(w):
            b = AttentionBlockParams(w, block.w_k, block.w_v, block.w1, block.b1, block.w2, block.b2)
            return ad.sum(ad.mul(long_term_forward([b], tables, 0, [2, 4, 5], [1, 2, 3]), readout))

        assert grad_check(f, Tensor(block.w_q.data.copy(), requires_grad=True)) < 1e-5


class TestBlocks:
    def test_queries_carry_user_and_time(self, rng):
        tables = EmbeddingTables.initialize(3, 4, 8, rng)
        q = build_queries(tables, 2, [0, 30])
        np.testing.assert_allclose(q.data[1], tables.user.data[2] + time_encoding(30, 8))

    def test_ffn_closed_form(self, rng):
        block = AttentionBlockParams.initialize(4, rng, "long_term.0", init_std=0.5)
        y = rng.normal(size=(3, 4))
        expected = np.maximum(y @ block.w1.data + block.b1.data, 0.0) @ block.w2.data + block.b2.data
        np.testing.assert_allclose(ffn(Tensor(y), block).data, expected, atol=1e-12)
