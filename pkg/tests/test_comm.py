import numpy as np
import pytest

from jigsaw.comm import (
    CommError,
    CommTimeout,
    ProcessGroup,
    decode_frame,
    encode_frame,
)
from jigsaw.runtime import WorkerError, run_spmd


class TestFrameCodec:
    def test_round_trip_f64(self, rng):
        arr = rng.normal(size=(3, 5))
        src, dst, tag, back = decode_frame(encode_frame(1, 2, 77, arr))
        assert (src, dst, tag) == (1, 2, 77)
        assert back.dtype == np.float64
        assert np.array_equal(back, arr)  # bit-exact transport

    def test_round_trip_f32(self, rng):
        arr = rng.normal(size=(4,)).astype(np.float32)
        _, _, _, back = decode_frame(encode_frame(0, 1, 5, arr))
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_layout(self, rng):
        arr = np.array([1.5], dtype=np.float32)
        frame = encode_frame(3, 4, 9, arr)
        assert frame[:4] == b"JGSW"
        # u32 src | u32 dst | u64 tag | u8 dtype | u8 ndim | u64 dim | payload
        assert len(frame) == 4 + 4 + 4 + 8 + 1 + 1 + 8 + 4


class TestPointToPoint:
    def test_send_recv(self):
        def work(comm):
            if comm.rank == 0:
                comm.isend(1, 7, np.array([1.0, 2.0, 3.0]))
                return None
            return comm.recv(0, 7)

        results = run_spmd(2, work)
        assert np.array_equal(results[1], [1.0, 2.0, 3.0])

    def test_tag_matching_out_of_order(self):
        def work(comm):
            if comm.rank == 0:
                comm.isend(1, 1, np.array([1.0]))
                comm.isend(1, 2, np.array([2.0]))
                return None
            second = comm.recv(0, 2)
            first = comm.recv(0, 1)
            return first[0], second[0]

        assert run_spmd(2, work)[1] == (1.0, 2.0)

    def test_same_tag_fifo_after_consumption(self):
        def work(comm):
            if comm.rank == 0:
                for v in (1.0, 2.0):
                    comm.isend(1, 5, np.array([v]))
                    comm.recv(1, 6)  # ack keeps at most one tag-5 frame in flight
                return None
            out = []
            for _ in range(2):
                out.append(comm.recv(0, 5)[0])
                comm.isend(0, 6, np.zeros(1))
            return out

        assert run_spmd(2, work)[1] == [1.0, 2.0]

    def test_isend_to_self_rejected(self):
        def work(comm):
            if comm.rank == 0:
                with pytest.raises(CommError, match="itself"):
                    comm.isend(0, 1, np.zeros(1))
            return True

        run_spmd(2, work)

    def test_unknown_peer_rejected(self):
        def work(comm):
            with pytest.raises(CommError, match="unknown peer"):
                comm.isend(5, 1, np.zeros(1))

        run_spmd(2, work)

    def test_duplicate_inflight_tag_rejected(self):
        def work(comm):
            if comm.rank == 0:
                comm.isend(1, 3, np.zeros(1))
                with pytest.raises(CommError, match="duplicate in-flight tag"):
                    comm.isend(1, 3, np.zeros(1))

        run_spmd(2, work)

    def test_double_wait_rejected(self):
        def work(comm):
            if comm.rank == 0:
                comm.isend(1, 3, np.zeros(2))
                return None
            h = comm.irecv(0, 3)
            h.wait()
            with pytest.raises(CommError, match="already waited"):
                h.wait()

        run_spmd(2, work)

    def test_f64_bit_patterns_round_trip(self):
        payload = np.array([np.pi, -0.0, 1e-300, 1e300])

        def work(comm):
            if comm.rank == 0:
                comm.isend(1, 1, payload)
                return None
            return comm.recv(0, 1)

        got = run_spmd(2, work)[1]
        assert got.tobytes() == payload.tobytes()

    def test_wait_timeout_names_peer_and_tag(self):
        def work(comm):
            if comm.rank == 1:
                with pytest.raises(CommTimeout, match="peer=0, tag=42"):
                    comm.irecv(0, 42).wait()

        run_spmd(2, work, timeout=0.2)


class TestReductions:
    def test_two_point_mean(self):
        def work(comm):
            val = np.array([2.0]) if comm.rank == 0 else np.array([4.0])
            return comm.allreduce_mean([0, 1], val)

        results = run_spmd(2, work)
        assert all(np.array_equal(r, [3.0]) for r in results)

    def test_idempotent_mean(self, rng):
        x = rng.normal(size=7)

        def work(comm):
            return comm.allreduce_mean([0, 1, 2], x)

        for r in run_spmd(3, work):
            assert np.allclose(r, x)

    def test_four_rank_scalar_mean(self):
        def work(comm):
            return comm.allreduce_mean(range(4), np.array([float(comm.rank + 1)]))

        for r in run_spmd(4, work):
            assert np.array_equal(r, [2.5])  # oracle: (1+2+3+4)/4

    def test_mean_deterministic_across_runs(self, rng):
        vals = rng.normal(size=(4, 9))

        def work(comm):
            return comm.allreduce_mean(range(4), vals[comm.rank])

        first = run_spmd(4, work)
        second = run_spmd(4, work)
        for a, b in zip(first, second):
            assert a.tobytes() == b.tobytes()

    def test_pairwise_reduce_mean(self):
        def work(comm):
            val = np.array([1.0]) if comm.rank == 0 else np.array([3.0])
            return comm.pairwise_reduce_mean(1 - comm.rank, val)

        for r in run_spmd(2, work):
            assert np.array_equal(r, [2.0])

    def test_pairwise_equal_tensors_unchanged(self, rng):
        x = rng.normal(size=5)

        def work(comm):
            return comm.pairwise_reduce_mean(1 - comm.rank, x)

        for r in run_spmd(2, work):
            assert np.array_equal(r, x)

    def test_pairwise_vector(self):
        def work(comm):
            val = np.array([1.0, 0.0]) if comm.rank == 0 else np.array([0.0, 1.0])
            return comm.pairwise_reduce_mean(1 - comm.rank, val)

        for r in run_spmd(2, work):
            assert np.array_equal(r, [0.5, 0.5])

    def test_pairwise_mismatch_times_out(self):
        # 0 names 1, 1 names 2, 2 names nobody: the guard must fire.
        def work(comm):
            if comm.rank == 0:
                with pytest.raises(CommTimeout):
                    comm.pairwise_reduce_mean(1, np.zeros(1))
            elif comm.rank == 1:
                with pytest.raises(CommTimeout):
                    comm.pairwise_reduce_mean(2, np.zeros(1))

        run_spmd(3, work, timeout=0.3)

    def test_shape_mismatch_reported(self):
        def work(comm):
            arr = np.zeros(2) if comm.rank == 0 else np.zeros(3)
            with pytest.raises(CommError, match="shape mismatch"):
                comm.pairwise_reduce_mean(1 - comm.rank, arr)

        run_spmd(2, work)


class TestProcessGroup:
    def test_mp_groups_are_consecutive_blocks(self):
        pg = ProcessGroup(8, 2, rank=5)
        assert pg.mp_group == [4, 5]
        assert pg.mp_pos == 1

    def test_dp_groups_by_residue(self):
        assert ProcessGroup.dp_groups(8, 2) == [[0, 2, 4, 6], [1, 3, 5, 7]]
        assert ProcessGroup.dp_groups(8, 4) == [[0, 4], [1, 5], [2, 6], [3, 7]]

    def test_membership_partition(self):
        for rank in range(8):
            pg = ProcessGroup(8, 4, rank)
            assert rank in pg.mp_group
            assert rank in pg.dp_group

    def test_world_not_divisible(self):
        with pytest.raises(ValueError):
            ProcessGroup(6, 4, 0)

    def test_bad_degree(self):
        with pytest.raises(ValueError):
            ProcessGroup(6, 3, 0)


def test_worker_error_carries_rank():
    def work(comm):
        if comm.rank == 1:
            raise RuntimeError("boom")

    with pytest.raises(WorkerError, match="rank 1"):
        run_spmd(2, work)
