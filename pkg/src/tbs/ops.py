"""Differentiable primitive operations (forward + analytical backward).

Every op is a pure function of numpy-backed ``Tensor`` values. When a
``Tape`` is active the op records a pullback closure; otherwise it is a
plain forward evaluation. Numerical floors: softmax subtracts the per-row
max, cosine similarity floors norms at its ``eps``, and the BCE loss clamps
probabilities at 1e-7 before the log.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, record

COSINE_EPS = 1e-8
BCE_CLAMP = 1e-7


class EmptyAxisError(ValueError):
    """An op was asked to normalize or reduce over an empty axis."""


class DegenerateInputError(ValueError):
    """Input is too small for the op to be well defined."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"sub: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    return record("sub", (a, b), out, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"mul: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return record("scale", (a,), out, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return record("relu", (a,), out, lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return record("sigmoid", (a,), out, lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    _require(a.data.ndim == 2, f"transpose: need a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    return record("transpose", (a,), out, lambda g: (g.T,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    _require(len(parts) >= 1, "concat_rows: need at least one part")
    widths = {p.shape[1:] for p in parts}
    _require(len(widths) == 1, f"concat_rows: mismatched trailing shapes {sorted(widths)}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return record("concat_rows", tuple(parts), out, bwd)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[0] == b.shape[0],
             f"concat_cols: shapes {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    na = a.shape[1]
    return record("concat_cols", (a, b), out, lambda g: (g[:, :na], g[:, na:]))


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    _require(a.data.ndim == 2, f"gather_rows: need a matrix, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return record("gather_rows", (a,), out, bwd)


def chw_to_rows(a: Tensor) -> Tensor:
    """[C,H,W] -> [(H*W), C] with pixels flattened h-major then w."""
    _require(a.data.ndim == 3, f"chw_to_rows: need C,H,W, got shape {a.shape}")
    c, h, w = a.shape
    out = Tensor(np.ascontiguousarray(a.data.reshape(c, h * w).T))
    return record("chw_to_rows", (a,), out,
                  lambda g: (np.ascontiguousarray(g.T).reshape(c, h, w),))


def rows_to_chw(a: Tensor, h: int, w: int) -> Tensor:
    """[(H*W), C] -> [C,H,W], inverse of :func:`chw_to_rows`."""
    _require(a.data.ndim == 2 and a.shape[0] == h * w,
             f"rows_to_chw: shape {a.shape} does not cover {h}x{w} pixels")
    c = a.shape[1]
    out = Tensor(np.ascontiguousarray(a.data.T).reshape(c, h, w))
    return record("rows_to_chw", (a,), out,
                  lambda g: (np.ascontiguousarray(g.reshape(c, h * w).T),))


def extract_patches(a: Tensor, patch: int) -> Tensor:
    """[1,H,W] -> [(H//p * W//p), p*p]; patches and pixels both h-major."""
    _require(a.data.ndim == 3 and a.shape[0] == 1,
             f"extract_patches: need 1,H,W, got shape {a.shape}")
    _, h, w = a.shape
    _require(h % patch == 0 and w % patch == 0,
             f"extract_patches: {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    blocks = a.data[0].reshape(hp, patch, wp, patch).transpose(0, 2, 1, 3)
    out = Tensor(np.ascontiguousarray(blocks.reshape(hp * wp, patch * patch)))

    def bwd(g):
        back = g.reshape(hp, wp, patch, patch).transpose(0, 2, 1, 3)
        return (np.ascontiguousarray(back).reshape(1, h, w),)

    return record("extract_patches", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
             f"matmul: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    return record("matmul", (a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of ``a`` by scalar ``s[i]``."""
    _require(a.data.ndim == 2 and s.data.ndim == 1 and a.shape[0] == s.shape[0],
             f"scale_rows: shapes {a.shape} vs {s.shape}")
    out = Tensor(a.data * s.data[:, None])
    return record("scale_rows", (a, s), out,
                  lambda g: (g * s.data[:, None], (g * a.data).sum(axis=1)))


def scale_spatial(a: Tensor, s: Tensor) -> Tensor:
    """Multiply feature map [C,H,W] by a per-pixel plane [H,W]."""
    _require(a.data.ndim == 3 and s.data.ndim == 2 and a.shape[1:] == s.shape,
             f"scale_spatial: shapes {a.shape} vs {s.shape}")
    out = Tensor(a.data * s.data[None])
    return record("scale_spatial", (a, s), out,
                  lambda g: (g * s.data[None], (g * a.data).sum(axis=0)))


# ---------------------------------------------------------------------------
# normalizers and similarities


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    _require(a.data.ndim == 2, f"softmax_rows: need a matrix, got shape {a.shape}")
    if a.shape[1] == 0:
        raise EmptyAxisError("softmax_rows: cannot normalize over an empty axis")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) * y,)

    return record("softmax_rows", (a,), out, bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize a vector to mean 0 / unit population variance; no affine."""
    _require(a.data.ndim == 1, f"layer_norm: need a vector, got shape {a.shape}")
    n = a.shape[0]
    if n < 2:
        raise DegenerateInputError(f"layer_norm: need >= 2 entries, got {n}")
    mu = a.data.mean()
    var = a.data.var()
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv
    out = Tensor(y)

    def bwd(g):
        gm = g.mean()
        gy = (g * y).mean()
        return (inv * (g - gm - y * gy),)

    return record("layer_norm", (a,), out, bwd)


def cosine_rows(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Per-row cosine similarity; norms are floored at ``eps``."""
    _require(a.shape == b.shape and a.data.ndim == 2,
             f"cosine_rows: shapes {a.shape} vs {b.shape}")
    na = np.maximum(np.linalg.norm(a.data, axis=1), eps)
    nb = np.maximum(np.linalg.norm(b.data, axis=1), eps)
    dot = (a.data * b.data).sum(axis=1)
    y = dot / (na * nb)
    out = Tensor(y)
    a_live = np.linalg.norm(a.data, axis=1) > eps
    b_live = np.linalg.norm(b.data, axis=1) > eps

    def bwd(g):
        coef = (g / (na * nb))[:, None]
        da = coef * b.data
        db = coef * a.data
        # Norm terms only vary where the norm is above the floor.
        da -= np.where(a_live, g * y / (na * na), 0.0)[:, None] * a.data
        db -= np.where(b_live, g * y / (nb * nb), 0.0)[:, None] * b.data
        return (da, db)

    return record("cosine_rows", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# parameterized layers


@dataclass
class LinearParams:
    """Dense projection ``X @ W.T + bias`` with ``weight`` shaped out x in."""

    weight: Tensor
    bias: Optional[Tensor] = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ConvParams:
    """3x3 convolution stack: ``weight`` shaped out x in x 3 x 3."""

    weight: Tensor
    bias: Tensor


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int,
                bias: bool = True, name: str = "") -> LinearParams:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero bias."""
    a = np.sqrt(6.0 / (in_dim + out_dim))
    w = Tensor(rng.uniform(-a, a, size=(out_dim, in_dim)), name=f"{name}.weight")
    b = Tensor(np.zeros(out_dim), name=f"{name}.bias") if bias else None
    return LinearParams(w, b)


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int,
              name: str = "") -> ConvParams:
    fan_in = in_ch * 9
    fan_out = out_ch * 9
    a = np.sqrt(6.0 / (fan_in + fan_out))
    w = Tensor(rng.uniform(-a, a, size=(out_ch, in_ch, 3, 3)), name=f"{name}.weight")
    b = Tensor(np.zeros(out_ch), name=f"{name}.bias")
    return ConvParams(w, b)


def linear(p: LinearParams, x: Tensor) -> Tensor:
    _require(x.data.ndim == 2 and x.shape[1] == p.in_dim,
             f"linear: input {x.shape} vs weight {p.weight.shape}")
    y = x.data @ p.weight.data.T
    if p.bias is not None:
        y = y + p.bias.data
    out = Tensor(y)
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def bwd(g):
        dx = g @ p.weight.data
        dw = g.T @ x.data
        if p.bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=0))

    return record("linear", inputs, out, bwd)


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """Unfold padded [C,H,W] into [(H'*W'), C*9] rows for a 3x3 kernel, pad 1.

    Column k = c*9 + di*3 + dj holds x_padded[c, oi*stride+di, oj*stride+dj].
    """
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]                     # [C, H', W', 3, 3]
    return win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c * 9)


def _col2im(cols: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    """Scatter-add the adjoint of :func:`_im2col`."""
    c, h, w = shape
    dxp = np.zeros((c, h + 2, w + 2), dtype=cols.dtype)
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    d5 = cols.reshape(h_out, w_out, c, 3, 3)
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h:stride, dj:dj + w:stride] += \
                d5[:, :, :, di, dj].transpose(2, 0, 1)
    return dxp[:, 1:-1, 1:-1]


def conv2d(p: ConvParams, x: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation, pad 1, stride 1 or 2; output H' = ceil(H/stride)."""
    _require(x.data.ndim == 3, f"conv2d: need C,H,W input, got shape {x.shape}")
    _require(stride in (1, 2), f"conv2d: stride must be 1 or 2, got {stride}")
    out_ch, in_ch = p.weight.shape[0], p.weight.shape[1]
    _require(x.shape[0] == in_ch,
             f"conv2d: input channels {x.shape[0]} vs weight {p.weight.shape}")
    c, h, w = x.shape
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    cols = _im2col(x.data, stride)
    wmat = p.weight.data.reshape(out_ch, in_ch * 9)
    y = cols @ wmat.T + p.bias.data
    out = Tensor(np.ascontiguousarray(y.T).reshape(out_ch, h_out, w_out))

    def bwd(g):
        gmat = np.ascontiguousarray(g.reshape(out_ch, h_out * w_out).T)
        dw = (gmat.T @ cols).reshape(p.weight.shape)
        db = gmat.sum(axis=0)
        dx = _col2im(gmat @ wmat, (c, h, w), stride)
        return (dx, dw, db)

    return record("conv2d", (x, p.weight, p.bias), out, bwd)


# ---------------------------------------------------------------------------
# reductions and loss


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    return record("sum_all", (a,), out,
                  lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def bce_loss(p: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    _require(p.shape == y.shape, f"bce_loss: shapes {p.shape} vs {y.shape}")
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.data.size
    val = -(y.data * np.log(pc) + (1.0 - y.data) * np.log(1.0 - pc)).mean()
    out = Tensor(np.asarray(val, dtype=p.data.dtype))
    inside = (p.data > BCE_CLAMP) & (p.data < 1.0 - BCE_CLAMP)

    def bwd(g):
        dp = np.where(inside, (pc - y.data) / (pc * (1.0 - pc)) / n, 0.0) * g
        return (dp, None)

    return record("bce_loss", (p, y), out, bwd)


PRIMITIVE_OPS = (
    "add", "sub", "mul", "scale", "relu", "sigmoid",
    "reshape", "transpose", "concat_rows", "concat_cols", "gather_rows",
    "chw_to_rows", "rows_to_chw", "extract_patches",
    "matmul", "scale_rows", "scale_spatial",
    "softmax_rows", "layer_norm", "cosine_rows",
    "linear", "conv2d", "sum_all", "bce_loss",
)
