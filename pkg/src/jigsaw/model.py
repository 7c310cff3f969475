"""Weather mixer network built entirely from sharded layers.

One code path serves every model-parallel degree: the encoder patchifies
and embeds, a stack of mixing blocks alternates token mixing (computed in
transposed orientation, x.T @ W, so no explicit transpose is needed) and
channel mixing, the decoder projects back to patch features, and a blend
layer forms the forecast as a per-variable convex combination of decoded
output and input state.

Parameter placement follows the block convention of jigsaw.parallel. In
4-way mode a few small vector parameters (layer-norm affines, biases,
blend weights) are duplicated across the two ranks that share their axis;
their gradients are pairwise-summed after backward so the copies never
drift, mirroring the layer-norm treatment of the 4-way scheme.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .parallel import (
    MpContext,
    Param,
    ShardedLinear,
    comm_volume,
    primitive_send_elements,
)
from .sharding import contiguous_split
from .tensor import MatmulMode


class ConfigError(ValueError):
    """Invalid experiment or model configuration; message names the field."""


@dataclass
class ModelConfig:
    n_vars: int = 8
    grid: tuple[int, int] = (32, 64)
    patch: tuple[int, int] = (4, 4)
    d_emb: int = 64
    d_tok: int = 128
    d_ch: int = 64
    n_blocks: int = 3
    dropout_rate: float = 0.0

    @property
    def lat(self) -> int:
        return self.grid[0]

    @property
    def lon(self) -> int:
        return self.grid[1]

    @property
    def patch_grid(self) -> tuple[int, int]:
        return self.grid[0] // self.patch[0], self.grid[1] // self.patch[1]

    @property
    def tokens(self) -> int:
        gl, gw = self.patch_grid
        return gl * gw

    @property
    def patch_features(self) -> int:
        return self.patch[0] * self.patch[1] * self.n_vars

    def validate(self, n: int = 1) -> None:
        for name in ("n_vars", "d_emb", "d_tok", "d_ch", "n_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("model.dropout_rate must be in [0, 1)")
        if self.lat % self.patch[0] or self.lon % self.patch[1]:
            raise ConfigError(
                f"model.grid {self.grid} not divisible by model.patch {self.patch}"
            )
        if n >= 2:
            for name in ("n_vars", "d_emb", "d_tok", "d_ch"):
                if getattr(self, name) % 2:
                    raise ConfigError(f"model.{name} must be even for {n}-way sharding")
        if n == 4:
            if self.patch_grid[1] % 2:
                raise ConfigError(
                    f"model.grid longitude patches ({self.patch_grid[1]}) must be even "
                    "for 4-way sharding"
                )

    def to_dict(self) -> dict:
        return {
            "n_vars": self.n_vars, "grid": list(self.grid), "patch": list(self.patch),
            "d_emb": self.d_emb, "d_tok": self.d_tok, "d_ch": self.d_ch,
            "n_blocks": self.n_blocks, "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        if "patch" in d:
            d["patch"] = tuple(d["patch"])
        return cls(**d)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def token_sets(cfg: ModelConfig) -> list[np.ndarray]:
    """Token indices owned by each longitude half (row-major token order)."""
    gl, gw = cfg.patch_grid
    half = gw // 2
    return [
        np.array([a * gw + b for a in range(gl) for b in range(i * half, (i + 1) * half)])
        for i in range(2)
    ]


class Layout:
    """Maps one parameter's global tensor to local shards per mp position."""

    def __init__(self, n: int, kind: str, shape: tuple[int, ...],
                 row_sets=None, col_sets=None):
        self.n = n
        self.kind = kind  # "matrix" | "vec_col" | "vec_row"
        self.shape = shape
        self.row_sets = row_sets
        self.col_sets = col_sets

    def local(self, global_arr: np.ndarray, pos: int) -> np.ndarray:
        if self.n == 1:
            return np.array(global_arr, copy=True)
        if self.kind == "matrix":
            out = global_arr[:, self.col_sets[pos % 2 if self.n == 4 else pos]]
            if self.n == 4:
                out = out[self.row_sets[pos // 2], :]
            return np.ascontiguousarray(out)
        if self.kind == "vec_col":
            return np.ascontiguousarray(
                global_arr[self.col_sets[pos % 2 if self.n == 4 else pos]]
            )
        # vec_row: replicated at n=2, split by row half at n=4
        if self.n == 2:
            return np.array(global_arr, copy=True)
        return np.ascontiguousarray(global_arr[self.row_sets[pos // 2]])

    def place(self, out: np.ndarray, pos: int, local: np.ndarray) -> None:
        if self.n == 1:
            out[...] = local
        elif self.kind == "matrix":
            cols = self.col_sets[pos % 2 if self.n == 4 else pos]
            if self.n == 4:
                out[np.ix_(self.row_sets[pos // 2], cols)] = local
            else:
                out[:, cols] = local
        elif self.kind == "vec_col":
            out[self.col_sets[pos % 2 if self.n == 4 else pos]] = local
        elif self.n == 2:
            out[...] = local
        else:
            out[self.row_sets[pos // 2]] = local

    def dup_positions(self, pos: int) -> tuple[int, ...]:
        if self.n == 1 or self.kind == "matrix":
            return ()
        if self.kind == "vec_col":
            return (pos, pos ^ 2) if self.n == 4 else ()
        return (0, 1) if self.n == 2 else (pos, pos ^ 1)

    def to_local_index(self, pos: int, idx: tuple[int, ...]):
        """Local index of a global entry on this position, or None."""
        if self.n == 1:
            return idx
        if self.kind == "matrix":
            cols = self.col_sets[pos % 2 if self.n == 4 else pos]
            hit_c = np.nonzero(cols == idx[-1])[0]
            if not hit_c.size:
                return None
            if self.n == 2:
                return (idx[0], int(hit_c[0]))
            rows = self.row_sets[pos // 2]
            hit_r = np.nonzero(rows == idx[0])[0]
            return (int(hit_r[0]), int(hit_c[0])) if hit_r.size else None
        if self.kind == "vec_col":
            sets = self.col_sets[pos % 2 if self.n == 4 else pos]
            hit = np.nonzero(sets == idx[0])[0]
            return (int(hit[0]),) if hit.size else None
        if self.n == 2:
            return idx
        rows = self.row_sets[pos // 2]
        hit = np.nonzero(rows == idx[0])[0]
        return (int(hit[0]),) if hit.size else None


class ShardedLayerNorm:
    """Last-axis layer norm with cross-rank moments when the axis is split.

    The normalized axis spans the model-parallel column split, so partial
    sums are exchanged with the rank holding the other half of each row.
    The affine parameters are sliced by column; in 4-way mode the two ranks
    sharing a column half keep identical copies whose gradients are summed
    pairwise after backward.
    """

    def __init__(self, ctx: MpContext, gamma: Param, beta: Param, c_total: int,
                 eps: float = 1e-5):
        if eps <= 0:
            raise ValueError(f"layer_norm eps must be > 0, got {eps}")
        self.ctx = ctx
        self.gamma = gamma
        self.beta = beta
        self.c_total = c_total
        self.eps = eps
        # Rank holding the other half of each normalized row.
        if ctx.n == 1:
            self.stats_peer = None
        elif ctx.n == 2:
            self.stats_peer = ctx.rank_at(1 - ctx.pos)
        else:
            self.stats_peer = ctx.rank_at(ctx.pos ^ 1)

    def _row_totals(self, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        stacked = np.stack([a, b], axis=-1)
        if self.stats_peer is not None:
            stacked = self.ctx.comm.pairwise_sum(self.stats_peer, stacked)
        return stacked[..., 0], stacked[..., 1]

    def forward(self, x: np.ndarray):
        s, sq = self._row_totals(x.sum(axis=-1), (x * x).sum(axis=-1))
        mean = s[..., None] / self.c_total
        var = sq[..., None] / self.c_total - mean * mean
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        y = self.gamma.data * xhat + self.beta.data
        return y, (xhat, inv_std)

    def backward(self, cache, g: np.ndarray) -> np.ndarray:
        xhat, inv_std = cache
        h = g * self.gamma.data
        sh, shx = self._row_totals(h.sum(axis=-1), (h * xhat).sum(axis=-1))
        dx = inv_std * (h - sh[..., None] / self.c_total - xhat * shx[..., None] / self.c_total)
        axes = tuple(range(g.ndim - 1))
        self.gamma.add_grad((g * xhat).sum(axis=axes))
        self.beta.add_grad(g.sum(axis=axes))
        return dx


class MixerBlock:
    """Token mixing then channel mixing, each pre-normed with a residual."""

    def __init__(self, ctx: MpContext, ln1, tok1, tok2, ln2, ch1, ch2,
                 dropout_rate: float, rng: np.random.Generator):
        self.ctx = ctx
        self.ln1, self.tok1, self.tok2 = ln1, tok1, tok2
        self.ln2, self.ch1, self.ch2 = ln2, ch1, ch2
        self.dropout_rate = dropout_rate
        self.rng = rng

    def _dropout(self, x: np.ndarray):
        mask = tensor.dropout_mask(x.shape, self.dropout_rate, self.rng)
        return (x if mask is None else x * mask), mask

    def forward(self, x: np.ndarray):
        u, c_ln1 = self.ln1.forward(x)
        h, c_t1 = self.tok1.forward(u)          # x^T W: [B, E, d_tok] blocks
        ha = tensor.gelu(h)
        hd, m1 = self._dropout(ha)
        o, c_t2 = self.tok2.forward(hd)         # W h^T: back to [B, T, E]
        x2 = x + o
        v, c_ln2 = self.ln2.forward(x2)
        c, c_c1 = self.ch1.forward(v)
        ca = tensor.gelu(c)
        cd, m2 = self._dropout(ca)
        z, c_c2 = self.ch2.forward(cd)
        y = x2 + z
        cache = (c_ln1, c_t1, h, m1, c_t2, c_ln2, c_c1, c, m2, c_c2)
        return y, cache

    def backward(self, cache, g: np.ndarray) -> np.ndarray:
        c_ln1, c_t1, h, m1, c_t2, c_ln2, c_c1, c, m2, c_c2 = cache
        g_z = self.ch2.backward(c_c2, g)
        if m2 is not None:
            g_z = g_z * m2
        g_c = tensor.gelu_backward(c, g_z)
        g_v = self.ch1.backward(c_c1, g_c)
        g_x2 = g + self.ln2.backward(c_ln2, g_v)
        g_o = self.tok2.backward(c_t2, g_x2)
        if m1 is not None:
            g_o = g_o * m1
        g_h = tensor.gelu_backward(h, g_o)
        g_u = self.tok1.backward(c_t1, g_h)
        return g_x2 + self.ln1.backward(c_ln1, g_u)


class WeatherMixerModel:
    """Encoder, mixing-block stack, decoder and blend over local shards."""

    def __init__(self, ctx: MpContext, cfg: ModelConfig, seed: int = 0,
                 dtype: str = "f64", eps: float = 1e-5):
        cfg.validate(ctx.n)
        self.ctx = ctx
        self.cfg = cfg
        self.dtype = np.dtype(tensor.DTYPES[dtype])
        self.seed = seed
        self.params: dict[str, Param] = {}
        self.layouts: dict[str, Layout] = {}
        self._init_rng = np.random.default_rng(seed)
        self._drop_rng = np.random.default_rng([seed, 7, ctx.comm.rank])

        n = ctx.n
        t_sets = token_sets(cfg)
        e_sets = contiguous_split(cfg.d_emb, 2)
        tk_sets = contiguous_split(cfg.d_tok, 2)
        ch_sets = contiguous_split(cfg.d_ch, 2)
        f_sets = contiguous_split(cfg.patch_features, 2)
        c_sets = contiguous_split(cfg.n_vars, 2)

        def weight(name, shape, fan_in, row_sets, col_sets, lr_class="body"):
            lay = Layout(n, "matrix", shape, row_sets, col_sets)
            bound = 1.0 / np.sqrt(fan_in)
            glob = self._init_rng.uniform(-bound, bound, size=shape).astype(self.dtype)
            return self._register(name, lay, glob, lr_class)

        def vec(name, size, sets, kind, init=0.0, lr_class="body"):
            lay = Layout(n, kind, (size,),
                         row_sets=sets if kind == "vec_row" else None,
                         col_sets=sets if kind == "vec_col" else None)
            glob = np.full(size, init, dtype=self.dtype)
            return self._register(name, lay, glob, lr_class)

        enc_w = weight("enc.w", (cfg.d_emb, cfg.patch_features), cfg.patch_features,
                       e_sets, f_sets, "encdec")
        enc_b = vec("enc.b", cfg.d_emb, e_sets, "vec_col", lr_class="encdec")
        self.encoder = ShardedLinear(ctx, enc_w, enc_b, MatmulMode.NT)

        self.blocks: list[MixerBlock] = []
        for i in range(cfg.n_blocks):
            p = f"block{i}."
            ln1 = ShardedLayerNorm(
                ctx,
                vec(p + "ln1.gamma", cfg.d_emb, e_sets, "vec_col", init=1.0),
                vec(p + "ln1.beta", cfg.d_emb, e_sets, "vec_col"),
                cfg.d_emb, eps,
            )
            tok1 = ShardedLinear(
                ctx,
                weight(p + "tok1.w", (cfg.tokens, cfg.d_tok), cfg.tokens, t_sets, tk_sets),
                vec(p + "tok1.b", cfg.d_tok, tk_sets, "vec_col"),
                MatmulMode.TN,
            )
            tok2 = ShardedLinear(
                ctx,
                weight(p + "tok2.w", (cfg.tokens, cfg.d_tok), cfg.d_tok, t_sets, tk_sets),
                vec(p + "tok2.b", cfg.tokens, t_sets, "vec_row"),
                MatmulMode.NT, weight_first=True,
            )
            ln2 = ShardedLayerNorm(
                ctx,
                vec(p + "ln2.gamma", cfg.d_emb, e_sets, "vec_col", init=1.0),
                vec(p + "ln2.beta", cfg.d_emb, e_sets, "vec_col"),
                cfg.d_emb, eps,
            )
            ch1 = ShardedLinear(
                ctx,
                weight(p + "ch1.w", (cfg.d_ch, cfg.d_emb), cfg.d_emb, ch_sets, e_sets),
                vec(p + "ch1.b", cfg.d_ch, ch_sets, "vec_col"),
                MatmulMode.NT,
            )
            ch2 = ShardedLinear(
                ctx,
                weight(p + "ch2.w", (cfg.d_emb, cfg.d_ch), cfg.d_ch, e_sets, ch_sets),
                vec(p + "ch2.b", cfg.d_emb, e_sets, "vec_col"),
                MatmulMode.NT,
            )
            self.blocks.append(
                MixerBlock(ctx, ln1, tok1, tok2, ln2, ch1, ch2, cfg.dropout_rate, self._drop_rng)
            )

        dec_w = weight("dec.w", (cfg.patch_features, cfg.d_emb), cfg.d_emb,
                       f_sets, e_sets, "encdec")
        dec_b = vec("dec.b", cfg.patch_features, f_sets, "vec_col", lr_class="encdec")
        self.decoder = ShardedLinear(ctx, dec_w, dec_b, MatmulMode.NT)

        self.blend = vec("blend.w", cfg.n_vars, c_sets, "vec_col", init=0.5)
        self._cache = None

    def _register(self, name: str, layout: Layout, global_init: np.ndarray,
                  lr_class: str) -> Param:
        local = layout.local(global_init, self.ctx.pos).astype(self.dtype)
        param = Param(name, local, lr_class, layout.dup_positions(self.ctx.pos))
        self.params[name] = param
        self.layouts[name] = layout
        return param

    # -- execution ---------------------------------------------------------
    @property
    def local_grid(self) -> tuple[int, int]:
        lat, lon = self.cfg.grid
        return lat, lon // 2 if self.ctx.n == 4 else lon

    def forward(self, x: np.ndarray, r: int = 1) -> np.ndarray:
        """Forecast from a local sample block, applying the processor r times."""
        if r < 1:
            raise ValueError(f"rollout length must be >= 1, got {r}")
        cfg = self.cfg
        xp = tensor.patchify(x, *cfg.patch)
        h, c_enc = self.encoder.forward(xp)
        passes = []
        for _ in range(r):
            blk_caches = []
            for blk in self.blocks:
                h, c = blk.forward(h)
                blk_caches.append(c)
            passes.append(blk_caches)
        d, c_dec = self.decoder.forward(h)
        lat, lon = self.local_grid
        decoded = tensor.unpatchify(d, lat, lon, *cfg.patch)
        w = self.blend.data
        out = w * decoded + (1.0 - w) * x
        self._cache = (x, c_enc, passes, c_dec, decoded)
        return out

    def backward(self, g_out: np.ndarray) -> None:
        """Accumulate parameter gradients; call grad_sync() afterwards."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward")
        x, c_enc, passes, c_dec, decoded = self._cache
        self._cache = None
        cfg = self.cfg
        w = self.blend.data
        axes = tuple(range(g_out.ndim - 1))
        self.blend.add_grad((g_out * (decoded - x)).sum(axis=axes))
        g_dec = g_out * w
        g_tok = tensor.patchify(g_dec, *cfg.patch)
        g_h = self.decoder.backward(c_dec, g_tok)
        for blk_caches in reversed(passes):
            for blk, cache in zip(reversed(self.blocks), reversed(blk_caches)):
                g_h = blk.backward(cache, g_h)
        g_xp = self.encoder.backward(c_enc, g_h)
        del g_xp  # gradient w.r.t. the input sample is not needed

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grad_sync(self) -> None:
        """Pairwise-sum gradients of duplicated vector parameters.

        Runs in registration order on every rank so the exchanges line up;
        afterwards duplicated copies hold bit-identical gradients.
        """
        for p in self.params.values():
            if len(p.dup_positions) > 1:
                partner = next(q for q in p.dup_positions if q != self.ctx.pos)
                p.grad = self.ctx.comm.pairwise_sum(self.ctx.rank_at(partner), p.grad)

    # -- introspection -------------------------------------------------------
    def param_elements(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def gather_global(self, name: str, locals_by_pos: dict[int, np.ndarray]) -> np.ndarray:
        lay = self.layouts[name]
        out = np.zeros(lay.shape, dtype=self.dtype)
        for pos, local in locals_by_pos.items():
            lay.place(out, pos, local)
        return out

    def set_param_entry(self, name: str, idx: tuple[int, ...], value: float) -> None:
        """Write one global parameter entry into this rank's copy, if owned."""
        local_idx = self.layouts[name].to_local_index(self.ctx.pos, idx)
        if local_idx is not None:
            self.params[name].data[local_idx] = value

    def get_param_entry(self, name, idx):
        local_idx = self.layouts[name].to_local_index(self.ctx.pos, idx)
        return None if local_idx is None else float(self.params[name].data[local_idx])

    def step_comm_volume(self, batch: int, r: int = 1) -> int:
        """Total elements sent across the mp group for one fwd+bwd pass.

        Linear layers follow the analytic schedule tables; layer norms
        exchange two row moments per call in forward and backward; the
        gradient sync ships each duplicated vector once.
        """
        cfg, n = self.cfg, self.ctx.n
        if n == 1:
            return 0
        total = 0
        m_tok = batch * cfg.tokens

        def layer(m, k, n_out, mode):
            rep = comm_volume(m, k, n_out, n, mode)
            return rep.total_sent

        total += layer(m_tok, cfg.patch_features, cfg.d_emb, MatmulMode.NT)     # encoder
        # tok2 takes the weight as first operand, so its forward/backward
        # primitives see (W, H) rather than (X, W); use the raw tables.
        wb = (cfg.tokens, cfg.d_tok)
        hb = (batch, cfg.d_emb, cfg.d_tok)
        ob = (batch, cfg.tokens, cfg.d_emb)
        tok2 = (
            sum(primitive_send_elements(MatmulMode.NT, n, wb, hb))
            + sum(primitive_send_elements(MatmulMode.NN, n, ob, hb))
            + sum(primitive_send_elements(MatmulMode.TN, n, ob, wb))
        )
        per_block = (
            layer(m_tok, cfg.d_emb, cfg.d_tok, MatmulMode.TN)                   # tok1
            + tok2
            + layer(m_tok, cfg.d_emb, cfg.d_ch, MatmulMode.NT)                  # ch1
            + layer(m_tok, cfg.d_ch, cfg.d_emb, MatmulMode.NT)                  # ch2
        )
        total += r * cfg.n_blocks * per_block
        total += layer(m_tok, cfg.d_emb, cfg.patch_features, MatmulMode.NT)     # decoder

        # Layer-norm row moments: every rank ships [.., rows, 2] twice per
        # call (forward + backward), 2 norms per block per pass.
        rows = batch * cfg.tokens if n == 2 else batch * cfg.tokens // 2
        total += r * cfg.n_blocks * 2 * 2 * (rows * 2) * n

        # Gradient sync of duplicated vectors: every holder ships its copy once.
        for p in self.params.values():
            if len(p.dup_positions) > 1:
                total += p.data.size * n
        return total
