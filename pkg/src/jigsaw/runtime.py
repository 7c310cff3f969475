"""SPMD launchers: run one function per rank on threads or OS processes."""

from __future__ import annotations

import multiprocessing as mp
import socket
import threading
import traceback

from .comm import DEFAULT_TIMEOUT, InProcWorld, SocketCommunicator


class WorkerError(RuntimeError):
    """A rank worker raised; carries the failing rank and its traceback."""

    def __init__(self, rank: int, message: str):
        super().__init__(f"rank {rank} failed:\n{message}")
        self.rank = rank


def run_spmd(world_size: int, fn, *args, timeout: float = DEFAULT_TIMEOUT):
    """Run fn(comm, *args) on every rank of an in-process world.

    Returns the per-rank results in rank order; the first worker exception
    is re-raised with its rank attached.
    """
    world = InProcWorld(world_size)
    results = [None] * world_size
    failures: list[WorkerError] = []
    lock = threading.Lock()

    def worker(rank: int) -> None:
        comm = world.communicator(rank, timeout)
        try:
            results[rank] = fn(comm, *args)
        except BaseException:
            with lock:
                failures.append(WorkerError(rank, traceback.format_exc()))

    threads = [threading.Thread(target=worker, args=(r,), daemon=True) for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise failures[0]
    return results


def free_ports(count: int) -> list[int]:
    """Grab ephemeral localhost ports (bound briefly, then released)."""
    socks, ports = [], []
    for _ in range(count):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def local_ranktable(world_size: int) -> list[dict]:
    return [
        {"rank": r, "host": "127.0.0.1", "port": p}
        for r, p in enumerate(free_ports(world_size))
    ]


def _socket_entry(rank, ranktable, fn, args, timeout, queue):
    try:
        comm = SocketCommunicator(rank, ranktable, timeout)
        try:
            out = fn(comm, *args)
        finally:
            comm.close()
        queue.put((rank, "ok", out))
    except BaseException:
        queue.put((rank, "err", traceback.format_exc()))


def run_spmd_sockets(world_size: int, fn, *args, ranktable=None,
                     timeout: float = DEFAULT_TIMEOUT, join_timeout: float = 120.0):
    """Run fn(comm, *args) on spawned OS processes over the socket backend.

    fn and its arguments must be picklable (top-level functions).
    """
    ctx = mp.get_context("spawn")
    table = ranktable or local_ranktable(world_size)
    queue = ctx.Queue()
    procs = [
        ctx.Process(target=_socket_entry, args=(r, table, fn, args, timeout, queue), daemon=True)
        for r in range(world_size)
    ]
    for p in procs:
        p.start()
    results = [None] * world_size
    failure = None
    for _ in range(world_size):
        rank, status, payload = queue.get(timeout=join_timeout)
        if status == "ok":
            results[rank] = payload
        elif failure is None:
            failure = WorkerError(rank, payload)
    for p in procs:
        p.join(timeout=join_timeout)
        if p.is_alive():
            p.terminate()
    if failure is not None:
        raise failure
    return results
