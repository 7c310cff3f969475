"""Zero-redundancy sharded linear algebra for 1-, 2- and 4-way groups.

Three collective primitives cover every layer multiplication:

    pnt(a, b) = a @ b.T      pnn(a, b) = a @ b      ptn(a, b) = a.T @ b

Each rank holds one block of every operand (column block for n=2, one cell
of the 2x2 grid for n=4, with rank r owning block (r // 2, r % 2)) and the
result comes out in the same block layout, so layers chain without any
re-distribution. Every schedule is fixed: sends are issued as early as
their data dependencies allow, local terms are computed while transfers
are in flight, receives are awaited last, and partial sums are added in
the block order of the underlying equation. Payloads are always single
blocks (partial products, raw data/gradient blocks, or weight blocks);
no rank ever materializes a full tensor.

The same schedules drive the analytic communication-volume tables below,
so instrumented byte counters can be checked against them exactly.

Backward passes compose the forward primitives:

    y = pnt(x, w):  dx = pnn(g, w)   dw = ptn(g, x)
    y = pnn(x, w):  dx = pnt(g, w)   dw = ptn(x, g)
    y = ptn(x, w):  dx = pnt(w, g)   dw = pnn(x, g)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .comm import Communicator
from .tensor import MatmulMode, ShapeError, matmul


def _rows(x: np.ndarray, idx: int) -> np.ndarray:
    h = x.shape[-2] // 2
    sl = [slice(None)] * x.ndim
    sl[-2] = slice(idx * h, (idx + 1) * h)
    return x[tuple(sl)]


class MpContext:
    """One rank's view of its model-parallel group."""

    def __init__(self, comm: Communicator, group: list[int]):
        group = sorted(group)
        if comm.rank not in group:
            raise ValueError(f"rank {comm.rank} not in model-parallel group {group}")
        if len(group) not in (1, 2, 4):
            raise ValueError(f"model-parallel group must have 1, 2 or 4 ranks, got {group}")
        self.comm = comm
        self.group = group
        self.n = len(group)
        self.pos = group.index(comm.rank)
        self.flops = 0
        # Live communication buffers holding parameter blocks, plus watermark.
        self.param_buffer_elements = 0
        self.param_buffer_peak = 0

    def rank_at(self, pos: int) -> int:
        return self.group[pos]

    def _mm(self, a, b, mode) -> np.ndarray:
        out = matmul(a, b, mode)
        k = a.shape[-1] if mode is not MatmulMode.TN else a.shape[-2]
        self.flops += 2 * out.size * k
        return out

    def _buf_acquire(self, size: int) -> None:
        self.param_buffer_elements += size
        self.param_buffer_peak = max(self.param_buffer_peak, self.param_buffer_elements)

    def _buf_release(self, size: int) -> None:
        self.param_buffer_elements -= size


class _RawRecv:
    """Tracks received raw blocks so parameter buffers are accounted."""

    def __init__(self, ctx: MpContext):
        self.ctx = ctx
        self.sizes: list[int] = []

    def wait(self, handle, is_param: bool) -> np.ndarray:
        arr = handle.wait()
        if is_param:
            self.ctx._buf_acquire(arr.size)
            self.sizes.append(arr.size)
        return arr

    def release(self) -> None:
        for s in self.sizes:
            self.ctx._buf_release(s)
        self.sizes.clear()


def _check_even(size: int, what: str) -> int:
    if size % 2:
        raise ShapeError(f"{what} of size {size} cannot split in two; pad the global tensor first")
    return size // 2


# -- pnt: c = a @ b.T ---------------------------------------------------------

def pnt(ctx: MpContext, a: np.ndarray, b: np.ndarray, *,
        a_is_param: bool = False, b_is_param: bool = False) -> np.ndarray:
    if a.dtype != b.dtype:
        raise ShapeError(f"pnt dtype mismatch: {a.dtype} vs {b.dtype}")
    if ctx.n == 1:
        return ctx._mm(a, b, MatmulMode.NT)
    if ctx.n == 2:
        return _nt2(ctx, a, b)
    return _nt4(ctx, a, b, a_is_param, b_is_param)


def _nt2(ctx, a, b):
    # a: [..., m, k/2], b: [..., n, k/2]; the k halves live on the two ranks.
    # Rank p sends its partial for the peer's output columns, computes its
    # own local term during the transfer, then adds the received partial.
    _check_even(b.shape[-2], "pnt output dimension")
    p = ctx.pos
    peer = ctx.rank_at(1 - p)
    tag = ctx.comm.reserve_tags(1)
    part = ctx._mm(a, _rows(b, 1 - p), MatmulMode.NT)
    send = ctx.comm.isend(peer, tag, part)
    local = ctx._mm(a, _rows(b, p), MatmulMode.NT)
    other = ctx.comm.irecv(peer, tag).wait()
    send.wait()
    # Terms ordered by global k half: rank 0's contribution first.
    return (local + other) if p == 0 else (other + local)


def _nt4(ctx, a, b, a_is_param, b_is_param):
    # Blocks: a = A(i,l), b = B(j,l) at rank 2*idx+sub; C(i,j) = sum_l A(i,l) B(j,l)^T.
    # Schedule: ranks 1 and 2 compute their diagonal products and ship them to
    # 0 and 3; ranks 0 and 3 forward raw (B, A) blocks to 2 and 1, which then
    # produce the two remaining cross partials.
    p = ctx.pos
    r = [ctx.rank_at(i) for i in range(4)]
    t = ctx.comm.reserve_tags(8)
    t_b0, t_a0, t_p10, t_b3, t_a3, t_q12, t_p23, t_q21 = range(t, t + 8)
    raw = _RawRecv(ctx)
    try:
        if p == 0:
            s1 = ctx.comm.isend(r[2], t_b0, b)
            s2 = ctx.comm.isend(r[2], t_a0, a)
            local = ctx._mm(a, b, MatmulMode.NT)            # A0 B0^T
            other = ctx.comm.irecv(r[1], t_p10).wait()      # A1 B1^T
            s1.wait(), s2.wait()
            return local + other
        if p == 1:
            part = ctx._mm(a, b, MatmulMode.NT)             # A1 B1^T -> rank 0
            s1 = ctx.comm.isend(r[0], t_p10, part)
            h_b3 = ctx.comm.irecv(r[3], t_b3)
            h_a3 = ctx.comm.irecv(r[3], t_a3)
            b3 = raw.wait(h_b3, b_is_param)
            local = ctx._mm(a, b3, MatmulMode.NT)           # A1 B3^T
            a3 = raw.wait(h_a3, a_is_param)
            s2 = ctx.comm.isend(r[2], t_q12, ctx._mm(a3, b, MatmulMode.NT))  # A3 B1^T
            other = ctx.comm.irecv(r[2], t_q21).wait()      # A0 B2^T
            s1.wait(), s2.wait()
            return other + local
        if p == 2:
            part = ctx._mm(a, b, MatmulMode.NT)             # A2 B2^T -> rank 3
            s1 = ctx.comm.isend(r[3], t_p23, part)
            h_b0 = ctx.comm.irecv(r[0], t_b0)
            h_a0 = ctx.comm.irecv(r[0], t_a0)
            b0 = raw.wait(h_b0, b_is_param)
            local = ctx._mm(a, b0, MatmulMode.NT)           # A2 B0^T
            a0 = raw.wait(h_a0, a_is_param)
            s2 = ctx.comm.isend(r[1], t_q21, ctx._mm(a0, b, MatmulMode.NT))  # A0 B2^T
            other = ctx.comm.irecv(r[1], t_q12).wait()      # A3 B1^T
            s1.wait(), s2.wait()
            return local + other
        s1 = ctx.comm.isend(r[1], t_b3, b)
        s2 = ctx.comm.isend(r[1], t_a3, a)
        local = ctx._mm(a, b, MatmulMode.NT)                # A3 B3^T
        other = ctx.comm.irecv(r[2], t_p23).wait()          # A2 B2^T
        s1.wait(), s2.wait()
        return other + local
    finally:
        raw.release()


# -- pnn: c = a @ b -----------------------------------------------------------

def pnn(ctx: MpContext, a: np.ndarray, b: np.ndarray, *,
        a_is_param: bool = False, b_is_param: bool = False) -> np.ndarray:
    if a.dtype != b.dtype:
        raise ShapeError(f"pnn dtype mismatch: {a.dtype} vs {b.dtype}")
    if ctx.n == 1:
        return ctx._mm(a, b, MatmulMode.NN)
    if ctx.n == 2:
        return _nn2(ctx, a, b, a_is_param)
    return _nn4(ctx, a, b, a_is_param, b_is_param)


def _nn2(ctx, a, b, a_is_param):
    # a: [..., m, k/2] exchanged raw; b: [..., k, n/2] stays put. Each rank
    # owns all k rows of its output-column block, so after the exchange both
    # terms are local.
    _check_even(b.shape[-2], "pnn contraction dimension")
    p = ctx.pos
    peer = ctx.rank_at(1 - p)
    tag = ctx.comm.reserve_tags(1)
    send = ctx.comm.isend(peer, tag, a)
    local = ctx._mm(a, _rows(b, p), MatmulMode.NN)
    raw = _RawRecv(ctx)
    try:
        a_other = raw.wait(ctx.comm.irecv(peer, tag), a_is_param)
        other = ctx._mm(a_other, _rows(b, 1 - p), MatmulMode.NN)
        send.wait()
        return (local + other) if p == 0 else (other + local)
    finally:
        raw.release()


def _nn4(ctx, a, b, a_is_param, b_is_param):
    # Blocks: a = A(i,l), b = B(l,j); C(i,j) = sum_l A(i,l) B(l,j).
    # Ranks 0 and 3 own one fully local term each and forward their raw
    # blocks; ranks 1 and 2 assemble their outputs from received raws and
    # ship the two remaining cross partials.
    p = ctx.pos
    r = [ctx.rank_at(i) for i in range(4)]
    t = ctx.comm.reserve_tags(8)
    t_a0, t_b0, t_a1, t_q13, t_a2, t_q20, t_b3, t_a3 = range(t, t + 8)
    raw = _RawRecv(ctx)
    try:
        if p == 0:
            s1 = ctx.comm.isend(r[1], t_a0, a)
            s2 = ctx.comm.isend(r[2], t_b0, b)
            local = ctx._mm(a, b, MatmulMode.NN)            # A0 B0
            other = ctx.comm.irecv(r[2], t_q20).wait()      # A1 B2
            s1.wait(), s2.wait()
            return local + other
        if p == 1:
            s1 = ctx.comm.isend(r[2], t_a1, a)
            h_a0 = ctx.comm.irecv(r[0], t_a0)
            h_b3 = ctx.comm.irecv(r[3], t_b3)
            h_a2 = ctx.comm.irecv(r[2], t_a2)
            a0 = raw.wait(h_a0, a_is_param)
            term0 = ctx._mm(a0, b, MatmulMode.NN)           # A0 B1
            b3 = raw.wait(h_b3, b_is_param)
            term1 = ctx._mm(a, b3, MatmulMode.NN)           # A1 B3
            a2 = raw.wait(h_a2, a_is_param)
            s2 = ctx.comm.isend(r[3], t_q13, ctx._mm(a2, b, MatmulMode.NN))  # A2 B1
            s1.wait(), s2.wait()
            return term0 + term1
        if p == 2:
            s1 = ctx.comm.isend(r[1], t_a2, a)
            h_b0 = ctx.comm.irecv(r[0], t_b0)
            h_a3 = ctx.comm.irecv(r[3], t_a3)
            h_a1 = ctx.comm.irecv(r[1], t_a1)
            b0 = raw.wait(h_b0, b_is_param)
            term0 = ctx._mm(a, b0, MatmulMode.NN)           # A2 B0
            a3 = raw.wait(h_a3, a_is_param)
            term1 = ctx._mm(a3, b, MatmulMode.NN)           # A3 B2
            a1 = raw.wait(h_a1, a_is_param)
            s2 = ctx.comm.isend(r[0], t_q20, ctx._mm(a1, b, MatmulMode.NN))  # A1 B2
            s1.wait(), s2.wait()
            return term0 + term1
        s1 = ctx.comm.isend(r[1], t_b3, b)
        s2 = ctx.comm.isend(r[2], t_a3, a)
        local = ctx._mm(a, b, MatmulMode.NN)                # A3 B3
        other = ctx.comm.irecv(r[1], t_q13).wait()          # A2 B1
        s1.wait(), s2.wait()
        return other + local
    finally:
        raw.release()


# -- ptn: c = a.T @ b ---------------------------------------------------------

def ptn(ctx: MpContext, a: np.ndarray, b: np.ndarray, *,
        a_is_param: bool = False, b_is_param: bool = False) -> np.ndarray:
    if a.dtype != b.dtype:
        raise ShapeError(f"ptn dtype mismatch: {a.dtype} vs {b.dtype}")
    if ctx.n == 1:
        return ctx._mm(a, b, MatmulMode.TN)
    if ctx.n == 2:
        return _tn2(ctx, a, b, a_is_param)
    return _tn4(ctx, a, b, a_is_param, b_is_param)


def _tn2(ctx, a, b, a_is_param):
    # a: [..., p, q/2] exchanged raw; output rows stack the two q halves.
    p = ctx.pos
    peer = ctx.rank_at(1 - p)
    tag = ctx.comm.reserve_tags(1)
    send = ctx.comm.isend(peer, tag, a)
    local = ctx._mm(a, b, MatmulMode.TN)
    raw = _RawRecv(ctx)
    try:
        a_other = raw.wait(ctx.comm.irecv(peer, tag), a_is_param)
        other = ctx._mm(a_other, b, MatmulMode.TN)
        send.wait()
        pair = (local, other) if p == 0 else (other, local)
        return np.concatenate(pair, axis=-2)
    finally:
        raw.release()


def _tn4(ctx, a, b, a_is_param, b_is_param):
    # Blocks: a = A(l,i), b = B(l,j); C(i,j) = sum_l A(l,i)^T B(l,j).
    # Mirror image of pnt: ranks 1 and 2 hold the locally-pairable products
    # (for 3 and 0), ranks 0 and 3 forward raw (A, B) blocks to 1 and 2.
    p = ctx.pos
    r = [ctx.rank_at(i) for i in range(4)]
    t = ctx.comm.reserve_tags(8)
    t_a0, t_b0, t_p13, t_q12, t_p20, t_q21, t_b3, t_a3 = range(t, t + 8)
    raw = _RawRecv(ctx)
    try:
        if p == 0:
            s1 = ctx.comm.isend(r[1], t_a0, a)
            s2 = ctx.comm.isend(r[1], t_b0, b)
            local = ctx._mm(a, b, MatmulMode.TN)            # A0^T B0
            other = ctx.comm.irecv(r[2], t_p20).wait()      # A2^T B2
            s1.wait(), s2.wait()
            return local + other
        if p == 1:
            part = ctx._mm(a, b, MatmulMode.TN)             # A1^T B1 -> rank 3
            s1 = ctx.comm.isend(r[3], t_p13, part)
            h_a0 = ctx.comm.irecv(r[0], t_a0)
            h_b0 = ctx.comm.irecv(r[0], t_b0)
            a0 = raw.wait(h_a0, a_is_param)
            term0 = ctx._mm(a0, b, MatmulMode.TN)           # A0^T B1
            b0 = raw.wait(h_b0, b_is_param)
            s2 = ctx.comm.isend(r[2], t_q12, ctx._mm(a, b0, MatmulMode.TN))  # A1^T B0
            other = ctx.comm.irecv(r[2], t_q21).wait()      # A2^T B3
            s1.wait(), s2.wait()
            return term0 + other
        if p == 2:
            part = ctx._mm(a, b, MatmulMode.TN)             # A2^T B2 -> rank 0
            s1 = ctx.comm.isend(r[0], t_p20, part)
            h_b3 = ctx.comm.irecv(r[3], t_b3)
            h_a3 = ctx.comm.irecv(r[3], t_a3)
            b3 = raw.wait(h_b3, b_is_param)
            s2 = ctx.comm.isend(r[1], t_q21, ctx._mm(a, b3, MatmulMode.TN))  # A2^T B3
            a3 = raw.wait(h_a3, a_is_param)
            term1 = ctx._mm(a3, b, MatmulMode.TN)           # A3^T B2
            other = ctx.comm.irecv(r[1], t_q12).wait()      # A1^T B0
            s1.wait(), s2.wait()
            return other + term1
        s1 = ctx.comm.isend(r[2], t_b3, b)
        s2 = ctx.comm.isend(r[2], t_a3, a)
        local = ctx._mm(a, b, MatmulMode.TN)                # A3^T B3
        other = ctx.comm.irecv(r[1], t_p13).wait()          # A1^T B1
        s1.wait(), s2.wait()
        return other + local
    finally:
        raw.release()


PRIMITIVES = {MatmulMode.NT: pnt, MatmulMode.NN: pnn, MatmulMode.TN: ptn}


# -- analytic communication volume -------------------------------------------

def _lead(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1


def primitive_send_elements(mode: MatmulMode, n: int, a_shape, b_shape) -> list[int]:
    """Elements sent per group position for one primitive call (global shapes)."""
    mode = MatmulMode(mode)
    la, lb = _lead(a_shape), _lead(b_shape)
    lc = max(la, lb)
    if mode is MatmulMode.NT:
        m, k = a_shape[-2], a_shape[-1]
        no = b_shape[-2]
        if n == 1:
            return [0]
        if n == 2:
            return [la * m * (no // 2)] * 2
        raw = lb * (no // 2) * (k // 2) + la * (m // 2) * (k // 2)
        part = 2 * lc * (m // 2) * (no // 2)
        return [raw, part, part, raw]
    if mode is MatmulMode.NN:
        m, k = a_shape[-2], a_shape[-1]
        no = b_shape[-1]
        if n == 1:
            return [0]
        if n == 2:
            return [la * m * (k // 2)] * 2
        a_blk = la * (m // 2) * (k // 2)
        b_blk = lb * (k // 2) * (no // 2)
        part = lc * (m // 2) * (no // 2)
        return [a_blk + b_blk, a_blk + part, a_blk + part, b_blk + a_blk]
    # TN
    p, q = a_shape[-2], a_shape[-1]
    s = b_shape[-1]
    if n == 1:
        return [0]
    if n == 2:
        return [la * p * (q // 2)] * 2
    a_blk = la * (p // 2) * (q // 2)
    b_blk = lb * (p // 2) * (s // 2)
    part = 2 * lc * (q // 2) * (s // 2)
    return [a_blk + b_blk, part, part, b_blk + a_blk]


@dataclass
class CommVolumeReport:
    """Per-rank element counts for one sharded linear layer."""

    n_way: int
    mode: MatmulMode
    forward_sent: list[int]
    backward_sent: list[int]

    @property
    def forward_total(self) -> int:
        return sum(self.forward_sent)

    @property
    def backward_total(self) -> int:
        return sum(self.backward_sent)

    @property
    def total_sent(self) -> int:
        return self.forward_total + self.backward_total

    @property
    def total_received(self) -> int:
        # Every send has exactly one matching receive.
        return self.total_sent


def comm_volume(m: int, k: int, n_out: int, n_way: int,
                mode: MatmulMode = MatmulMode.NT, batch: int = 1) -> CommVolumeReport:
    """Analytic transfer counts for a linear layer of the given global dims.

    `m` counts rows of the activation (batch folded in via `batch`); the
    backward column composes the primitives listed in the module docstring.
    """
    if min(m, k, n_out) <= 0:
        raise ValueError(f"layer dims must be positive, got {(m, k, n_out)}")
    mode = MatmulMode(mode)
    if mode is MatmulMode.NT:
        x, w, y = (batch, m, k), (n_out, k), (batch, m, n_out)
        fwd = primitive_send_elements(mode, n_way, x, w)
        bwd = _vec_sum(
            primitive_send_elements(MatmulMode.NN, n_way, y, w),
            primitive_send_elements(MatmulMode.TN, n_way, y, x),
        )
    elif mode is MatmulMode.NN:
        x, w, y = (batch, m, k), (k, n_out), (batch, m, n_out)
        fwd = primitive_send_elements(mode, n_way, x, w)
        bwd = _vec_sum(
            primitive_send_elements(MatmulMode.NT, n_way, y, w),
            primitive_send_elements(MatmulMode.TN, n_way, x, y),
        )
    else:
        x, w, y = (batch, m, k), (m, n_out), (batch, k, n_out)
        fwd = primitive_send_elements(mode, n_way, x, w)
        bwd = _vec_sum(
            primitive_send_elements(MatmulMode.NT, n_way, w, y),
            primitive_send_elements(MatmulMode.NN, n_way, x, y),
        )
    return CommVolumeReport(n_way, mode, fwd, bwd)


def _vec_sum(a: list[int], b: list[int]) -> list[int]:
    return [x + y for x, y in zip(a, b)]


# -- sharded linear layer -----------------------------------------------------

@dataclass
class Param:
    """One locally stored parameter shard with gradient accumulation."""

    name: str
    data: np.ndarray
    lr_class: str = "body"
    # Model-parallel positions holding an identical copy (len > 1 means the
    # gradient must be pairwise-summed with the partner after backward).
    dup_positions: tuple[int, ...] = ()
    grad: np.ndarray | None = field(default=None, repr=False)

    @property
    def dup_factor(self) -> int:
        return max(1, len(self.dup_positions))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class ShardedLinear:
    """Linear layer whose weight and bias exist only as this rank's blocks.

    mode NT computes y = x W^T, NN computes y = x W, TN computes y = x^T W.
    With weight_first=True the weight is the left operand of the NT
    primitive (y = W x^T), which is how the second token-mixing linear
    avoids an explicit transpose; its bias then runs along the row axis.
    """

    def __init__(self, ctx: MpContext, weight: Param, bias: Param | None,
                 mode: MatmulMode = MatmulMode.NT, weight_first: bool = False):
        if weight_first and MatmulMode(mode) is not MatmulMode.NT:
            raise ValueError("weight_first is only defined for NT layers")
        self.ctx = ctx
        self.weight = weight
        self.bias = bias
        self.mode = MatmulMode(mode)
        self.weight_first = weight_first

    def forward(self, x: np.ndarray):
        w = self.weight.data
        if self.weight_first:
            y = pnt(self.ctx, w, x, a_is_param=True)
        else:
            y = PRIMITIVES[self.mode](self.ctx, x, w, b_is_param=True)
        if self.bias is not None:
            if self.weight_first:
                y = y + self.bias.data[:, None]
            else:
                y = y + self.bias.data
        return y, x

    def backward(self, cache, g: np.ndarray) -> np.ndarray:
        x = cache
        w = self.weight.data
        if self.weight_first:
            # y = W x^T: the weight takes the first-operand role.
            self.weight.add_grad(_flatten_lead(pnn(self.ctx, g, x)))
            gx = ptn(self.ctx, g, w, b_is_param=True)
            if self.bias is not None:
                self.bias.add_grad(_sum_except(g, axis=-2))
            return gx
        if self.mode is MatmulMode.NT:
            gx = pnn(self.ctx, g, w, b_is_param=True)
            self.weight.add_grad(_flatten_lead(ptn(self.ctx, g, x)))
        elif self.mode is MatmulMode.NN:
            gx = pnt(self.ctx, g, w, b_is_param=True)
            self.weight.add_grad(_flatten_lead(ptn(self.ctx, x, g)))
        else:  # TN
            gx = pnt(self.ctx, w, g, a_is_param=True)
            self.weight.add_grad(_flatten_lead(pnn(self.ctx, x, g)))
        if self.bias is not None:
            self.bias.add_grad(_sum_except(g, axis=-1))
        return gx


def _flatten_lead(arr: np.ndarray) -> np.ndarray:
    """Sum away broadcast batch dims so weight grads stay 2-D."""
    if arr.ndim == 2:
        return arr
    return arr.sum(axis=tuple(range(arr.ndim - 2)))


def _sum_except(arr: np.ndarray, axis: int) -> np.ndarray:
    keep = axis % arr.ndim
    return arr.sum(axis=tuple(i for i in range(arr.ndim) if i != keep))
