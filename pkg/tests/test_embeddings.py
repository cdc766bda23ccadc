import numpy as np
import pytest

from sanmove.src.embeddings import EmbeddingTables, time_encoding, time_table
from sanmove.src.errors import ConfigError


class TestTimeEncoding:
    def test_slot_zero(self):
        expected = np.tile([0.0, 1.0], 4)
        np.testing.assert_array_equal(time_encoding(0, 8), expected)

    def test_all_slots_are_distinct(self):
        table = time_table(16).data
        assert table.shape == (48, 16)
        distances = np.linalg.norm(table[:, None, :] - table[None, :, :], axis=-1)
        off_diagonal = distances[~np.eye(48, dtype=bool)]
        assert off_diagonal.min() > 1e-6

    def test_frequencies(self):
        t, d = 7, 8
        enc = time_encoding(t, d)
        for i in range(d // 2):
            angle = t / 10000 ** (2 * i / d)
            assert enc[2 * i] == pytest.approx(np.sin(angle))
            assert enc[2 * i + 1] == pytest.approx(np.cos(angle))

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            time_encoding(3, 7)

    def test_table_is_constant(self):
        assert not time_table(8).requires_grad


class TestEmbeddingTables:
    def test_shapes_and_pad_row(self, rng):
        tables = EmbeddingTables.initialize(3, 5, 8, rng)
        assert tables.user.shape == (3, 8)
        assert tables.location.shape == (6, 8)
        np.testing.assert_array_equal(tables.location.data[0], 0.0)
        assert tables.location.name == "embeddings.location"

    def test_embed_session(self, rng):
        tables = EmbeddingTables.initialize(3, 5, 8, rng)
        user_rows, location_rows, time_rows = tables.embed_session(2, [1, 0, 4], [0, 47, 24])
        np.testing.assert_array_equal(user_rows.data, np.repeat(tables.user.data[[2]], 3, axis=0))
        np.testing.assert_array_equal(location_rows.data[1], 0.0)
        np.testing.assert_array_equal(time_rows.data[0], time_encoding(0, 8))
        np.testing.assert_array_equal(time_rows.data[1], time_encoding(47, 8))

    def test_slot_out_of_range(self, rng):
        tables = EmbeddingTables.initialize(1, 3, 4, rng)
        with pytest.raises(IndexError):
            tables.embed_session(0, [1], [48])

    def test_length_mismatch(self, rng):
        tables = EmbeddingTables.initialize(1, 3, 4, rng)
        with pytest.raises(ValueError):
            tables.embed_session(0, [1, 2], [3])

    def test_odd_width(self, rng):
        with pytest.raises(ConfigError):
            EmbeddingTables.initialize(1, 3, 5, rng)
