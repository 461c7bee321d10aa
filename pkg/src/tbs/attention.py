"""Scaled dot-product cross-attention used to reconstruct one feature set
from another.

``cross_reconstruct`` normalizes over the context (key) axis, so each source
pixel distributes unit attention mass over the context pixels, and the
reconstruction is the attention-weighted sum of value-projected context rows:

    attn  = softmax_rows(q(F_src) @ k(F_ctx).T / sqrt(d))
    recon = attn @ v(F_ctx)

Single head; ``d`` is the value/key projection width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


class EmptyContextError(ValueError):
    """Attention was given zero context rows; the caller decides policy."""


@dataclass
class AttentionOutput:
    recon: Tensor   # [N_src x d], convex combinations of value rows
    attn: Tensor    # [N_src x N_ctx], row-stochastic


def cross_reconstruct(q_head: ops.LinearParams, k_head: ops.LinearParams,
                      v_head: ops.LinearParams, f_src: Tensor,
                      f_ctx: Tensor) -> AttentionOutput:
    """Reconstruct each source row as attention over the context rows."""
    if f_ctx.shape[0] == 0:
        raise EmptyContextError("cross_reconstruct: context has no rows")
    if f_src.shape[1] != f_ctx.shape[1]:
        raise ShapeError(
            f"cross_reconstruct: channel mismatch {f_src.shape} vs {f_ctx.shape}")
    q = ops.linear(q_head, f_src)
    k = ops.linear(k_head, f_ctx)
    v = ops.linear(v_head, f_ctx)
    d = q.shape[1]
    logits = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(d))
    attn = ops.softmax_rows(logits)
    recon = ops.matmul(attn, v)
    return AttentionOutput(recon=recon, attn=attn)
