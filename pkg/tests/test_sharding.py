import numpy as np
import pytest

from jigsaw.sharding import ShardSpec, contiguous_split, gather, shard


def specs_for(n, shape, **kw):
    return [ShardSpec(n, r, tuple(shape), **kw) for r in range(n)]


class TestShardSpec:
    def test_two_way_column_split(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        s = specs_for(2, x.shape)
        assert np.array_equal(shard(x, s[0]), [[1.0], [3.0]])
        assert np.array_equal(shard(x, s[1]), [[2.0], [4.0]])

    def test_four_way_blocks(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        blocks = [shard(x, s) for s in specs_for(4, x.shape)]
        assert [float(b) for b in blocks] == [1.0, 2.0, 3.0, 4.0]

    def test_odd_dim_zero_padded(self):
        x = np.arange(6.0).reshape(2, 3)
        s = specs_for(2, x.shape)
        b1 = shard(x, s[1])
        assert b1.shape == (2, 2)
        assert np.array_equal(b1[:, 1], [0.0, 0.0])  # padded region identically zero
        assert np.array_equal(gather([shard(x, sp) for sp in s], s), x)

    def test_round_trip_bit_exact(self, rng):
        for n in (1, 2, 4):
            x = rng.normal(size=(6, 8))
            s = specs_for(n, x.shape)
            back = gather([shard(x, sp) for sp in s], s)
            assert back.tobytes() == x.tobytes()

    def test_round_trip_with_batch_dims(self, rng):
        x = rng.normal(size=(2, 3, 6, 8))
        s = specs_for(4, x.shape)
        blocks = [shard(x, sp) for sp in s]
        assert blocks[0].shape == (2, 3, 3, 4)
        assert np.array_equal(gather(blocks, s), x)

    def test_four_way_odd_both_dims(self, rng):
        x = rng.normal(size=(5, 7))
        s = specs_for(4, x.shape)
        blocks = [shard(x, sp) for sp in s]
        assert all(b.shape == (3, 4) for b in blocks)
        assert np.array_equal(gather(blocks, s), x)

    def test_custom_column_split(self, rng):
        x = rng.normal(size=(4, 6))
        sets = [np.array([0, 2, 4]), np.array([1, 3, 5])]
        s = specs_for(2, x.shape, col_split=tuple(sets))
        blocks = [shard(x, sp) for sp in s]
        assert np.array_equal(blocks[0], x[:, [0, 2, 4]])
        assert np.array_equal(gather(blocks, s), x)

    def test_block_coordinates(self):
        s = ShardSpec(4, 3, (4, 4))
        assert (s.block_row, s.block_col) == (1, 1)

    def test_inconsistent_specs_rejected(self, rng):
        x = rng.normal(size=(4, 4))
        good = specs_for(2, x.shape)
        bad = [good[0], ShardSpec(2, 1, (4, 6))]
        with pytest.raises(ValueError):
            gather([shard(x, s) for s in good], bad)

    def test_duplicate_rank_rejected(self, rng):
        x = rng.normal(size=(4, 4))
        s = [ShardSpec(2, 0, (4, 4)), ShardSpec(2, 0, (4, 4))]
        with pytest.raises(ValueError, match="every rank"):
            gather([shard(x, s[0])] * 2, s)

    def test_padding_bookkeeping(self):
        s = ShardSpec(2, 1, (2, 3))
        assert s.pad_cols == 1
        assert s.local_shape == (2, 2)
        s4 = ShardSpec(4, 0, (5, 7))
        assert (s4.pad_rows, s4.pad_cols) == (1, 1)


def test_contiguous_split_covers_padded_axis():
    parts = contiguous_split(7, 2)
    assert [len(p) for p in parts] == [4, 4]
    assert parts[0][0] == 0 and parts[1][-1] == 7
