"""Rank-addressed message passing with nonblocking point-to-point transfers.

Two interchangeable backends: an in-process backend that runs each rank on
its own thread and moves encoded frames through per-channel queues, and a
socket backend that connects OS processes in a full TCP mesh. Both transport
the same little-endian wire frame, so payloads round-trip bit-identically on
either:

    magic "JGSW" | u32 src | u32 dst | u64 tag | u8 dtype (0=f32, 1=f64)
    | u8 ndim | ndim x u64 dims | payload bytes

Collective helpers (allreduce_mean, pairwise reductions, barrier) reduce in
a fixed rank-ascending order so results are deterministic and identical on
every member.
"""

from __future__ import annotations

import collections
import json
import os
import socket
import struct
import threading
import time

import numpy as np

MAGIC = b"JGSW"
DEFAULT_TIMEOUT = 30.0

# Tags at or above this value are reserved for collective operations; user
# point-to-point traffic must stay below it.
COLLECTIVE_TAG_BASE = 1 << 48

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIIQBB")


class CommError(RuntimeError):
    """Transport-level failure (bad peer, duplicate tag, shutdown, ...)."""


class CommTimeout(CommError):
    """Deadlock guard: a wait exceeded its timeout."""


def encode_frame(src: int, dst: int, tag: int, arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype)
    if dt not in _DTYPE_CODE:
        raise CommError(f"unsupported payload dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr)
    head = _HEADER.pack(MAGIC, src, dst, tag, _DTYPE_CODE[dt], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype(dt.newbyteorder("<"), copy=False).tobytes()
    return head + dims + payload


def decode_frame(buf: bytes):
    magic, src, dst, tag, dtype_code, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CommError(f"bad frame magic {magic!r}")
    off = _HEADER.size
    dims = struct.unpack_from(f"<{ndim}Q", buf, off) if ndim else ()
    off += 8 * ndim
    dt = _CODE_DTYPE[dtype_code]
    arr = np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).astype(dt.newbyteorder("="))
    return src, dst, tag, arr


class PendingTransfer:
    """Handle for one nonblocking send or receive; wait exactly once."""

    def __init__(self, comm, peer: int, tag: int, direction: str):
        self.comm = comm
        self.peer = peer
        self.tag = tag
        self.direction = direction
        self._done = False

    def wait(self, timeout: float | None = None):
        if self._done:
            raise CommError(
                f"transfer (peer={self.peer}, tag={self.tag}, {self.direction}) already waited on"
            )
        self._done = True
        if self.direction == "send":
            return self.comm._finish_send(self)
        return self.comm._finish_recv(self)


class _Mailbox:
    """Per-rank inbox of undelivered frames keyed by (src, tag)."""

    def __init__(self):
        self.cond = threading.Condition()
        self.frames: dict[tuple[int, int], collections.deque] = collections.defaultdict(
            collections.deque
        )
        self.error: Exception | None = None

    def put(self, src: int, tag: int, frame: bytes, *, check_duplicate: bool) -> None:
        with self.cond:
            key = (src, tag)
            if check_duplicate and tag < COLLECTIVE_TAG_BASE and self.frames[key]:
                self.error = CommError(
                    f"duplicate in-flight tag {tag} on channel {src}->receiver"
                )
                self.cond.notify_all()
                raise self.error
            self.frames[key].append(frame)
            self.cond.notify_all()

    def take(self, src: int, tag: int, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        key = (src, tag)
        with self.cond:
            while not self.frames[key]:
                if self.error is not None:
                    raise self.error
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise CommTimeout(
                        f"timed out after {timeout:.1f}s waiting for peer={src}, tag={tag}"
                    )
                self.cond.wait(min(remaining, 0.5))
            return self.frames[key].popleft()


class Communicator:
    """Per-rank endpoint: point-to-point transfers plus group reductions."""

    def __init__(self, rank: int, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        if not 0 <= rank < world_size:
            raise CommError(f"rank {rank} outside world of size {world_size}")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self._coll_seq = 0
        self.sent_messages = 0
        self.sent_elements = 0
        self.sent_bytes = 0
        self.recv_messages = 0
        self.recv_elements = 0
        self.recv_bytes = 0

    # -- transport hooks ---------------------------------------------------
    def _deliver(self, peer: int, frame: bytes) -> None:
        raise NotImplementedError

    def _collect(self, peer: int, tag: int, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # -- point to point ----------------------------------------------------
    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.world_size:
            raise CommError(f"unknown peer {peer} in world of size {self.world_size}")
        if peer == self.rank:
            raise CommError(f"rank {self.rank} cannot transfer to itself")

    def isend(self, peer: int, tag: int, arr: np.ndarray) -> PendingTransfer:
        """Queue a tensor for delivery and return immediately.

        The payload is encoded (copied) here, so the caller may reuse the
        array right away.
        """
        self._check_peer(peer)
        frame = encode_frame(self.rank, peer, tag, arr)
        self._deliver(peer, frame)
        self.sent_messages += 1
        self.sent_elements += arr.size
        self.sent_bytes += len(frame)
        return PendingTransfer(self, peer, tag, "send")

    def irecv(self, peer: int, tag: int) -> PendingTransfer:
        self._check_peer(peer)
        return PendingTransfer(self, peer, tag, "recv")

    def _finish_send(self, h: PendingTransfer):
        return None

    def _finish_recv(self, h: PendingTransfer) -> np.ndarray:
        frame = self._collect(h.peer, h.tag, self.timeout)
        src, dst, tag, arr = decode_frame(frame)
        if (src, dst, tag) != (h.peer, self.rank, h.tag):
            raise CommError(
                f"frame routing mismatch: got ({src}->{dst}, tag {tag}), "
                f"expected ({h.peer}->{self.rank}, tag {h.tag})"
            )
        self.recv_messages += 1
        self.recv_elements += arr.size
        self.recv_bytes += len(frame)
        return arr

    def recv(self, peer: int, tag: int) -> np.ndarray:
        return self.irecv(peer, tag).wait()

    # -- collectives ---------------------------------------------------------
    def reserve_tags(self, count: int) -> int:
        """Reserve a block of collective tags; SPMD callers advance in lockstep."""
        base = COLLECTIVE_TAG_BASE + self._coll_seq
        self._coll_seq += count
        return base

    def _reduce_to_root(self, group, arr, tag):
        group = sorted(group)
        root = group[0]
        if self.rank == root:
            acc = np.array(arr, copy=True)
            for r in group[1:]:
                acc = acc + self.recv(r, tag)
            return acc
        self.isend(root, tag, arr)
        return None

    def _broadcast(self, group, arr, tag):
        group = sorted(group)
        root = group[0]
        if self.rank == root:
            for r in group[1:]:
                self.isend(r, tag, arr)
            return arr
        return self.recv(root, tag)

    def allreduce_sum(self, group, arr: np.ndarray) -> np.ndarray:
        """Elementwise sum over the group, identical bytes on every member.

        Gather-to-lowest-rank then broadcast; summation runs in ascending
        rank order, so the result is deterministic. Adequate for the small
        fixed groups used here.
        """
        group = sorted(group)
        if self.rank not in group:
            raise CommError(f"rank {self.rank} not in reduction group {group}")
        if len(group) == 1:
            return np.array(arr, copy=True)
        tag = self.reserve_tags(2)
        total = self._reduce_to_root(group, arr, tag)
        return self._broadcast(group, total, tag + 1)

    def allreduce_mean(self, group, arr: np.ndarray) -> np.ndarray:
        """Elementwise arithmetic mean over the group (deterministic order)."""
        group = sorted(group)
        if self.rank not in group:
            raise CommError(f"rank {self.rank} not in reduction group {group}")
        if len(group) == 1:
            return np.array(arr, copy=True)
        tag = self.reserve_tags(2)
        total = self._reduce_to_root(group, arr, tag)
        if total is not None:
            total = total / len(group)
        return self._broadcast(group, total, tag + 1)

    def _pairwise(self, peer: int, arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exchange with one peer; returns (lower-rank tensor, higher-rank tensor)."""
        self._check_peer(peer)
        tag = self.reserve_tags(1)
        self.isend(peer, tag, arr)
        other = self.recv(peer, tag)
        if other.shape != np.shape(arr):
            raise CommError(
                f"pairwise shape mismatch: local {np.shape(arr)} vs peer {other.shape}"
            )
        return (arr, other) if self.rank < peer else (other, arr)

    def pairwise_reduce_mean(self, peer: int, arr: np.ndarray) -> np.ndarray:
        """(t_self + t_peer) / 2, summed in rank order on both members."""
        lo, hi = self._pairwise(peer, arr)
        return (lo + hi) / 2

    def pairwise_sum(self, peer: int, arr: np.ndarray) -> np.ndarray:
        """t_self + t_peer, summed in rank order so both members agree bitwise."""
        lo, hi = self._pairwise(peer, arr)
        return lo + hi

    def barrier(self, group=None) -> None:
        group = list(range(self.world_size)) if group is None else group
        if len(group) > 1:
            self.allreduce_sum(group, np.zeros(1))

    def reset_counters(self) -> None:
        self.sent_messages = self.sent_elements = self.sent_bytes = 0
        self.recv_messages = self.recv_elements = self.recv_bytes = 0


class InProcWorld:
    """Shared mailbox fabric for one in-process world of rank threads."""

    def __init__(self, world_size: int):
        self.world_size = world_size
        self.mailboxes = [_Mailbox() for _ in range(world_size)]

    def communicator(self, rank: int, timeout: float = DEFAULT_TIMEOUT) -> "InProcCommunicator":
        return InProcCommunicator(self, rank, timeout)


class InProcCommunicator(Communicator):
    """Thread-backed rank: frames pass through the world's mailboxes."""

    def __init__(self, world: InProcWorld, rank: int, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, world.world_size, timeout)
        self.world = world

    def _deliver(self, peer: int, frame: bytes) -> None:
        self.world.mailboxes[peer].put(self.rank, decode_tag(frame), frame, check_duplicate=True)

    def _collect(self, peer: int, tag: int, timeout: float) -> bytes:
        return self.world.mailboxes[self.rank].take(peer, tag, timeout)


def decode_tag(frame: bytes) -> int:
    return _HEADER.unpack_from(frame, 0)[3]


class ProcessGroup:
    """World of ranks split into model-parallel and data-parallel groups.

    Model-parallel groups are the consecutive blocks [k*n, k*n + n); the
    data-parallel group of rank r is every rank with the same r % n.
    """

    def __init__(self, world_size: int, n: int, rank: int):
        if n not in (1, 2, 4):
            raise ValueError(f"model-parallel degree must be 1, 2 or 4, got {n}")
        if world_size % n:
            raise ValueError(f"world size {world_size} not divisible by n={n}")
        if not 0 <= rank < world_size:
            raise ValueError(f"rank {rank} outside world of size {world_size}")
        self.world_size = world_size
        self.n = n
        self.rank = rank

    @property
    def mp_group(self) -> list[int]:
        k = self.rank // self.n
        return list(range(k * self.n, (k + 1) * self.n))

    @property
    def mp_pos(self) -> int:
        return self.rank % self.n

    @property
    def dp_group(self) -> list[int]:
        return [r for r in range(self.world_size) if r % self.n == self.rank % self.n]

    @property
    def dp_index(self) -> int:
        """Which data-parallel replica this rank belongs to."""
        return self.rank // self.n

    @property
    def dp_replicas(self) -> int:
        return self.world_size // self.n

    @staticmethod
    def dp_groups(world_size: int, n: int) -> list[list[int]]:
        return [[r for r in range(world_size) if r % n == c] for c in range(n)]


# -- socket backend ---------------------------------------------------------

ENV_RANK = "JIGSAW_RANK"
ENV_WORLD = "JIGSAW_WORLD"
ENV_RANKTABLE = "JIGSAW_RANKTABLE"


def load_ranktable(path: str) -> list[dict]:
    with open(path) as f:
        table = json.load(f)
    entries = sorted(table, key=lambda e: e["rank"])
    if [e["rank"] for e in entries] != list(range(len(entries))):
        raise CommError(f"rank table must cover ranks 0..{len(entries) - 1} exactly")
    return entries


def _read_exact(sock: socket.socket, nbytes: int) -> bytes:
    buf = bytearray()
    while len(buf) < nbytes:
        chunk = sock.recv(nbytes - len(buf))
        if not chunk:
            raise CommError("connection closed while reading frame")
        buf.extend(chunk)
    return bytes(buf)


class SocketCommunicator(Communicator):
    """Full-mesh TCP backend; one OS process per rank.

    Ranks connect to every lower rank and accept from every higher one. A
    reader thread per peer deposits frames into the mailbox; a writer thread
    per peer drains an outbox so isend returns immediately.
    """

    def __init__(self, rank: int, ranktable: list[dict], timeout: float = DEFAULT_TIMEOUT,
                 connect_timeout: float = 20.0):
        super().__init__(rank, len(ranktable), timeout)
        self.mailbox = _Mailbox()
        self._socks: dict[int, socket.socket] = {}
        self._outboxes: dict[int, collections.deque] = {}
        self._out_cond: dict[int, threading.Condition] = {}
        self._threads: list[threading.Thread] = []
        self._closing = False

        me = ranktable[rank]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((me["host"], me["port"]))
        listener.listen(len(ranktable))
        listener.settimeout(connect_timeout)

        expected_higher = {r for r in range(len(ranktable)) if r > rank}
        deadline = time.monotonic() + connect_timeout
        for peer in range(rank):
            entry = ranktable[peer]
            while True:
                try:
                    s = socket.create_connection((entry["host"], entry["port"]), timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        listener.close()
                        raise CommError(f"rank {rank} could not reach rank {peer}")
                    time.sleep(0.05)
            s.sendall(struct.pack("<4sI", MAGIC, rank))
            self._socks[peer] = s
        while expected_higher:
            try:
                s, _ = listener.accept()
            except socket.timeout:
                listener.close()
                raise CommError(f"rank {rank} timed out waiting for peers {sorted(expected_higher)}")
            magic, peer = struct.unpack("<4sI", _read_exact(s, 8))
            if magic != MAGIC or peer not in expected_higher:
                listener.close()
                raise CommError(f"unexpected handshake from peer {peer}")
            expected_higher.discard(peer)
            self._socks[peer] = s
        listener.close()

        for peer, s in self._socks.items():
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._outboxes[peer] = collections.deque()
            self._out_cond[peer] = threading.Condition()
            t = threading.Thread(target=self._reader, args=(peer, s), daemon=True)
            w = threading.Thread(target=self._writer, args=(peer, s), daemon=True)
            t.start()
            w.start()
            self._threads += [t, w]

    def _reader(self, peer: int, s: socket.socket) -> None:
        try:
            while True:
                head = _read_exact(s, _HEADER.size)
                _, src, dst, tag, dtype_code, ndim = _HEADER.unpack(head)
                dims_raw = _read_exact(s, 8 * ndim) if ndim else b""
                dims = struct.unpack(f"<{ndim}Q", dims_raw) if ndim else ()
                nbytes = int(np.prod(dims, dtype=np.int64)) * _CODE_DTYPE[dtype_code].itemsize
                payload = _read_exact(s, nbytes)
                self.mailbox.put(src, tag, head + dims_raw + payload, check_duplicate=True)
        except (CommError, OSError) as exc:
            if not self._closing:
                with self.mailbox.cond:
                    if self.mailbox.error is None:
                        self.mailbox.error = CommError(f"reader for peer {peer} failed: {exc}")
                    self.mailbox.cond.notify_all()

    def _writer(self, peer: int, s: socket.socket) -> None:
        cond, box = self._out_cond[peer], self._outboxes[peer]
        try:
            while True:
                with cond:
                    while not box:
                        if self._closing:
                            return
                        cond.wait(0.5)
                    frame = box.popleft()
                s.sendall(frame)
        except OSError:
            pass

    def _deliver(self, peer: int, frame: bytes) -> None:
        with self._out_cond[peer]:
            self._outboxes[peer].append(frame)
            self._out_cond[peer].notify()

    def _collect(self, peer: int, tag: int, timeout: float) -> bytes:
        return self.mailbox.take(peer, tag, timeout)

    def close(self) -> None:
        # Drain outboxes before tearing down so tail sends are not lost.
        deadline = time.monotonic() + 5.0
        for peer, cond in self._out_cond.items():
            with cond:
                while self._outboxes[peer] and time.monotonic() < deadline:
                    cond.wait(0.05)
        self._closing = True
        for cond in self._out_cond.values():
            with cond:
                cond.notify_all()
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


def communicator_from_env(timeout: float = DEFAULT_TIMEOUT) -> SocketCommunicator:
    """Build a socket communicator from JIGSAW_RANK/WORLD/RANKTABLE."""
    rank = int(os.environ[ENV_RANK])
    table = load_ranktable(os.environ[ENV_RANKTABLE])
    world = int(os.environ.get(ENV_WORLD, len(table)))
    if world != len(table):
        raise CommError(f"{ENV_WORLD}={world} disagrees with rank table of {len(table)}")
    return SocketCommunicator(rank, table, timeout)
