"""Dense numeric kernels: matmul variants, GELU, layer norm, patchify, dropout.

Tensors are contiguous row-major numpy arrays in f32 or f64. Every kernel
validates operand shapes before touching data, and every differentiable
kernel ships a hand-written backward. Accumulation happens in the operand
dtype so that serial and sharded partial sums stay comparable under one
tolerance.
"""

from __future__ import annotations

import enum

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class MatmulMode(str, enum.Enum):
    """The three layer multiplication layouts: X@W, X@W.T and X.T@W."""

    NN = "NN"
    NT = "NT"
    TN = "TN"


def as_tensor(x, dtype=None) -> np.ndarray:
    """Coerce to a contiguous f32/f64 array (f64 by default)."""
    arr = np.ascontiguousarray(x, dtype=DTYPES[dtype] if isinstance(dtype, str) else dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _check_operands(a: np.ndarray, b: np.ndarray, mode: MatmulMode) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    mode = MatmulMode(mode)
    if mode is MatmulMode.NN:
        ok = a.shape[-1] == b.shape[-2]
    elif mode is MatmulMode.NT:
        ok = a.shape[-1] == b.shape[-1]
    else:  # TN
        ok = a.shape[-2] == b.shape[-2]
    if not ok:
        raise ShapeError(f"matmul {mode.value}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray, mode: MatmulMode = MatmulMode.NN) -> np.ndarray:
    """Multiply under the given mode; leading batch dimensions broadcast.

    NN: a[..., m, k] @ b[..., k, n] -> [..., m, n]
    NT: a[..., m, k] @ b[..., n, k].T -> [..., m, n]
    TN: a[..., m, k].T @ b[..., m, n] -> [..., k, n]
    """
    _check_operands(a, b, mode)
    mode = MatmulMode(mode)
    if mode is MatmulMode.NN:
        return np.matmul(a, b)
    if mode is MatmulMode.NT:
        return np.matmul(a, np.swapaxes(b, -1, -2))
    return np.matmul(np.swapaxes(a, -1, -2), b)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact-erf GELU: x * Phi(x)."""
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def gelu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """upstream * dGELU/dx with dGELU/dx = Phi(x) + x * phi(x)."""
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return upstream * (cdf + x * phi)


def _ln_stats(x: np.ndarray, eps: float):
    # One shared formula (E[x^2] - mean^2) so the sharded partial-moment path
    # reproduces the serial kernel to rounding error.
    c = x.shape[-1]
    mean = np.sum(x, axis=-1, keepdims=True) / c
    var = np.sum(x * x, axis=-1, keepdims=True) / c - mean * mean
    inv_std = 1.0 / np.sqrt(var + eps)
    return mean, inv_std


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}"
        )
    mean, inv_std = _ln_stats(x, eps)
    return gamma * ((x - mean) * inv_std) + beta


def layer_norm_backward(x: np.ndarray, gamma: np.ndarray, eps: float, upstream: np.ndarray):
    """Gradients of layer_norm w.r.t. (x, gamma, beta)."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    c = x.shape[-1]
    mean, inv_std = _ln_stats(x, eps)
    xhat = (x - mean) * inv_std
    h = upstream * gamma
    mean_h = np.sum(h, axis=-1, keepdims=True) / c
    mean_hx = np.sum(h * xhat, axis=-1, keepdims=True) / c
    dx = inv_std * (h - mean_h - xhat * mean_hx)
    reduce_axes = tuple(range(x.ndim - 1))
    dgamma = np.sum(upstream * xhat, axis=reduce_axes)
    dbeta = np.sum(upstream, axis=reduce_axes)
    return dx, dgamma, dbeta


def patchify(x: np.ndarray, p_lat: int, p_lon: int) -> np.ndarray:
    """[B, lat, lon, C] -> [B, tokens, C*p_lat*p_lon].

    Tokens run row-major over the patch grid; patch features are
    channel-major so a channel split of the input maps to a contiguous
    split of the feature axis.
    """
    b, lat, lon, c = x.shape
    if lat % p_lat or lon % p_lon:
        raise ShapeError(f"grid {lat}x{lon} not divisible by patch {p_lat}x{p_lon}")
    gl, gw = lat // p_lat, lon // p_lon
    xr = x.reshape(b, gl, p_lat, gw, p_lon, c)
    xr = xr.transpose(0, 1, 3, 5, 2, 4)  # [B, gl, gw, C, p_lat, p_lon]
    return np.ascontiguousarray(xr.reshape(b, gl * gw, c * p_lat * p_lon))


def unpatchify(tokens: np.ndarray, lat: int, lon: int, p_lat: int, p_lon: int) -> np.ndarray:
    """Exact inverse of patchify."""
    b, n_tok, feat = tokens.shape
    gl, gw = lat // p_lat, lon // p_lon
    if n_tok != gl * gw or feat % (p_lat * p_lon):
        raise ShapeError(f"token tensor {tokens.shape} does not fit grid {lat}x{lon}")
    c = feat // (p_lat * p_lon)
    xr = tokens.reshape(b, gl, gw, c, p_lat, p_lon)
    xr = xr.transpose(0, 1, 4, 2, 5, 3)  # [B, gl, p_lat, gw, p_lon, C]
    return np.ascontiguousarray(xr.reshape(b, lat, lon, c))


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray | None:
    """Inverted-dropout mask (None when the layer is a no-op)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)
