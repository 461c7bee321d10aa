"""Dense mask-aggregation segmentation head.

Every query pixel attends over all support pixels (across shots); its
foreground probability is the attention-weighted mean of the binary support
mask values, so predictions are convex combinations in [0, 1]. The head owns
its two projections, separate from the scoring module's heads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .episodes import FEATURE_SIZE
from .tensor import ShapeError, Tensor


@dataclass
class HeadParams:
    q_head: ops.LinearParams
    k_head: ops.LinearParams


def init_head_params(rng: np.random.Generator, channels: int) -> HeadParams:
    return HeadParams(
        q_head=ops.init_linear(rng, channels, channels, name="head.q_head"),
        k_head=ops.init_linear(rng, channels, channels, name="head.k_head"),
    )


def predict_mask(hp: HeadParams, f_q: Tensor,
                 adapted: Sequence[Tuple[Tensor, np.ndarray]]
                 ) -> Tuple[Tensor, Tensor]:
    """Aggregate support mask values through query-support attention.

    ``adapted`` holds per shot the adapted support features as rows
    [N_s x C] and the binary support mask at feature resolution. Returns
    (probs [8x8], attn [N_q x K*N_s]).
    """
    if len(adapted) == 0:
        raise ShapeError("predict_mask: need at least one support shot")
    feats = [a for a, _ in adapted]
    masks = [np.asarray(m).reshape(-1, 1) for _, m in adapted]
    support = feats[0] if len(feats) == 1 else ops.concat_rows(feats)
    mask_col = Tensor(np.concatenate(masks, axis=0).astype(f_q.data.dtype))

    q = ops.linear(hp.q_head, f_q)
    k = ops.linear(hp.k_head, support)
    c = q.shape[1]
    logits = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(c))
    attn = ops.softmax_rows(logits)
    probs = ops.reshape(ops.matmul(attn, mask_col), (FEATURE_SIZE, FEATURE_SIZE))
    return probs, attn


@dataclass
class AaStats:
    """Averaged attention mass between class-matched pixel groups.

    ``sf_qf``: mean over query-foreground rows of the attention mass landing
    on support-foreground columns; ``sb_qb`` likewise for background. A
    statistic is None (absent) when its query group is empty. ``*_pairs``
    are the per-pair means reported in verbose output.
    """

    sf_qf: Optional[float]
    sb_qb: Optional[float]
    avg: Optional[float]
    sf_qf_pairs: Optional[float] = None
    sb_qb_pairs: Optional[float] = None


def averaged_attention(attn: np.ndarray, query_mask_feat: np.ndarray,
                       support_masks_feat: Sequence[np.ndarray]) -> AaStats:
    """Summarize the head's cross-attention with class-matched mass."""
    a = np.asarray(attn)
    q_flat = np.asarray(query_mask_feat).reshape(-1)
    s_flat = np.concatenate([np.asarray(m).reshape(-1)
                             for m in support_masks_feat])
    if a.shape != (q_flat.size, s_flat.size):
        raise ShapeError(f"averaged_attention: attn {a.shape} vs masks "
                         f"({q_flat.size}, {s_flat.size})")
    qf = q_flat == 1
    qb = ~qf
    sf = s_flat == 1
    sb = ~sf

    def mass(rows, cols):
        if not rows.any():
            return None
        return float(a[rows][:, cols].sum(axis=1).mean())

    def pair_mean(rows, cols):
        if not rows.any() or not cols.any():
            return None
        return float(a[rows][:, cols].mean())

    sf_qf = mass(qf, sf)
    sb_qb = mass(qb, sb)
    avg = None if sf_qf is None or sb_qb is None else (sf_qf + sb_qb) / 2.0
    return AaStats(sf_qf=sf_qf, sb_qb=sb_qb, avg=avg,
                   sf_qf_pairs=pair_mean(qf, sf),
                   sb_qb_pairs=pair_mean(qb, sb))
