"""Block placement of global matrices on model-parallel ranks.

Convention: with n=2 the last dimension splits into two column blocks; with
n=4 the last two dimensions split into a 2x2 block grid and rank r owns
block (r // 2, r % 2). Odd dimensions are zero-padded on the high side so
block shapes match across ranks; gather strips the padding again.

An axis split is a list of index arrays (one per part) into the padded
axis. Splits are contiguous by default; the model uses a strided split for
its token axis, which the same machinery handles unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def padded_size(size: int, parts: int) -> int:
    return -(-size // parts) * parts


def contiguous_split(size: int, parts: int) -> list[np.ndarray]:
    """Equal contiguous chunks of the padded axis."""
    chunk = padded_size(size, parts) // parts
    return [np.arange(p * chunk, (p + 1) * chunk) for p in range(parts)]


def pad_axes(arr: np.ndarray, sizes: dict[int, int]) -> np.ndarray:
    """Zero-pad selected axes (by index) up to the given sizes."""
    widths = [(0, 0)] * arr.ndim
    needs = False
    for axis, target in sizes.items():
        pad = target - arr.shape[axis]
        if pad < 0:
            raise ValueError(f"cannot pad axis {axis} of {arr.shape} down to {target}")
        if pad:
            widths[axis] = (0, pad)
            needs = True
    return np.pad(arr, widths) if needs else arr


@dataclass(frozen=True)
class ShardSpec:
    """Placement of one rank's block of a global tensor.

    n=1 keeps the tensor whole; n=2 assigns column block `rank`; n=4
    assigns block (block_row, block_col) = (rank // 2, rank % 2) of the
    trailing two dimensions.
    """

    n: int
    rank: int
    global_shape: tuple[int, ...]
    row_split: tuple = field(default=None)  # optional custom split of axis -2 (n=4)
    col_split: tuple = field(default=None)  # optional custom split of axis -1

    def __post_init__(self):
        if self.n not in (1, 2, 4):
            raise ValueError(f"shard degree must be 1, 2 or 4, got {self.n}")
        if not 0 <= self.rank < self.n:
            raise ValueError(f"rank {self.rank} outside shard degree {self.n}")
        if self.n == 4 and len(self.global_shape) < 2:
            raise ValueError(f"4-way sharding needs >=2-D tensors, got {self.global_shape}")
        if self.n >= 2 and len(self.global_shape) < 1:
            raise ValueError("cannot shard a 0-D tensor")

    @property
    def block_row(self) -> int:
        return self.rank // 2 if self.n == 4 else 0

    @property
    def block_col(self) -> int:
        return self.rank % 2 if self.n == 4 else self.rank

    def _splits(self):
        rows = cols = None
        if self.n == 2:
            cols = self.col_split or contiguous_split(self.global_shape[-1], 2)
        elif self.n == 4:
            rows = self.row_split or contiguous_split(self.global_shape[-2], 2)
            cols = self.col_split or contiguous_split(self.global_shape[-1], 2)
        return rows, cols

    @property
    def padded_shape(self) -> tuple[int, ...]:
        shape = list(self.global_shape)
        rows, cols = self._splits()
        if cols is not None:
            shape[-1] = sum(len(ix) for ix in cols)
        if rows is not None:
            shape[-2] = sum(len(ix) for ix in rows)
        return tuple(shape)

    @property
    def local_shape(self) -> tuple[int, ...]:
        shape = list(self.padded_shape)
        rows, cols = self._splits()
        if cols is not None:
            shape[-1] = len(cols[self.block_col])
        if rows is not None:
            shape[-2] = len(rows[self.block_row])
        return tuple(shape)

    @property
    def pad_rows(self) -> int:
        return self.padded_shape[-2] - self.global_shape[-2] if self.n == 4 else 0

    @property
    def pad_cols(self) -> int:
        return self.padded_shape[-1] - self.global_shape[-1] if self.n >= 2 else 0


def shard(global_arr: np.ndarray, spec: ShardSpec) -> np.ndarray:
    """This rank's zero-padded block of a global tensor."""
    if tuple(global_arr.shape) != tuple(spec.global_shape):
        raise ValueError(f"tensor shape {global_arr.shape} does not match spec {spec.global_shape}")
    if spec.n == 1:
        return np.array(global_arr, copy=True)
    rows, cols = spec._splits()
    padded = pad_axes(
        global_arr,
        {global_arr.ndim - 1: spec.padded_shape[-1], global_arr.ndim - 2: spec.padded_shape[-2]}
        if spec.n == 4
        else {global_arr.ndim - 1: spec.padded_shape[-1]},
    )
    out = np.take(padded, cols[spec.block_col], axis=-1)
    if rows is not None:
        out = np.take(out, rows[spec.block_row], axis=-2)
    return np.ascontiguousarray(out)


def gather(blocks: list[np.ndarray], specs: list[ShardSpec]) -> np.ndarray:
    """Reassemble the global tensor from every rank's block, stripping padding."""
    if len(blocks) != len(specs) or len(blocks) != specs[0].n:
        raise ValueError(f"need one block per rank: {len(blocks)} blocks for n={specs[0].n}")
    base = specs[0]
    for spec in specs:
        if (spec.n, spec.global_shape) != (base.n, base.global_shape):
            raise ValueError("inconsistent shard specs across ranks")
    if sorted(spec.rank for spec in specs) != list(range(base.n)):
        raise ValueError("shard specs must cover every rank exactly once")
    if base.n == 1:
        return np.array(blocks[0], copy=True)

    out = np.zeros(base.padded_shape, dtype=blocks[0].dtype)
    rows, cols = base._splits()
    for block, spec in zip(blocks, specs):
        if tuple(block.shape) != spec.local_shape:
            raise ValueError(f"block shape {block.shape} does not match spec {spec.local_shape}")
        col_ix = cols[spec.block_col]
        if rows is None:
            out[..., col_ix] = block
        else:
            row_ix = rows[spec.block_row]
            out[..., row_ix[:, None], col_ix[None, :]] = block
    trim = tuple(slice(0, s) for s in base.global_shape)
    return np.ascontiguousarray(out[trim])
