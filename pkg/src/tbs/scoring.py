"""Spatial scoring of support pixels and suppression of disruptive background.

Per support shot, three per-pixel score planes are produced at feature
resolution:

* query-relevant score (stage ``Q``): cosine similarity between the
  query-reconstructed support features and the value-projected originals;
  high where a support pixel is well described by the query.
* target-relevant score (stage ``T``): the same construction with the
  support's own foreground pixels as attention context; high where a support
  pixel resembles the target object.
* background-relevant score (stage ``B``): their difference, masked to the
  support background (foreground positions are exactly zero).

A small refinement block (score plane concatenated with its layer-normed
copy, two 1x1 convolutions, sigmoid) converts the background score into
(0, 1) weights; foreground positions are then pinned to exactly 1 with no
gradient, and the weights scale the support features channel-wise.

The q/k/v/l projection heads are single shared instances used by both
scoring paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import ops
from .attention import cross_reconstruct
from .tensor import ShapeError, Tensor

SCORE_STAGES = ("Q", "T", "B", "refined", "pinned")
REFINE_WIDTH = 256


class DegenerateSupportError(ValueError):
    """Support mask has no foreground at feature resolution."""


@dataclass
class TbsParams:
    """Shared projection heads plus the refinement block weights."""

    q_head: ops.LinearParams
    k_head: ops.LinearParams
    v_head: ops.LinearParams
    l_head: ops.LinearParams
    refine_conv1: ops.LinearParams   # 2 -> 256, acts as a 1x1 conv over pixels
    refine_conv2: ops.LinearParams   # 256 -> 1


def init_tbs_params(rng: np.random.Generator, channels: int) -> TbsParams:
    return TbsParams(
        q_head=ops.init_linear(rng, channels, channels, name="tbs.q_head"),
        k_head=ops.init_linear(rng, channels, channels, name="tbs.k_head"),
        v_head=ops.init_linear(rng, channels, channels, name="tbs.v_head"),
        l_head=ops.init_linear(rng, channels, channels, name="tbs.l_head"),
        refine_conv1=ops.init_linear(rng, 2, REFINE_WIDTH, name="tbs.refine_conv1"),
        refine_conv2=ops.init_linear(rng, REFINE_WIDTH, 1, name="tbs.refine_conv2"),
    )


@dataclass
class ScoreMap:
    """Per-pixel score plane at feature resolution, tagged with its stage."""

    values: Tensor   # [H x W]
    stage: str

    def __post_init__(self):
        if self.stage not in SCORE_STAGES:
            raise ValueError(f"unknown score stage {self.stage!r}")
        if self.values.data.ndim != 2:
            raise ShapeError(f"score map must be H x W, got {self.values.shape}")


@dataclass
class SupportSplit:
    """Disjoint flattened pixel positions (h-major) of one support mask."""

    object_indices: np.ndarray
    background_indices: np.ndarray


def split_support(m_feat: np.ndarray) -> SupportSplit:
    """Partition feature-resolution pixels by the binary support mask."""
    flat = np.asarray(m_feat).reshape(-1)
    positions = np.arange(flat.size)
    obj = positions[flat == 1]
    return SupportSplit(object_indices=obj,
                        background_indices=positions[flat != 1])


def query_relevant_score(p: TbsParams, f_s: Tensor, f_q: Tensor,
                         h: int, w: int) -> ScoreMap:
    """Score each support pixel by how well the query reconstructs it."""
    recon = cross_reconstruct(p.q_head, p.k_head, p.v_head, f_s, f_q).recon
    sim = ops.cosine_rows(ops.linear(p.l_head, recon),
                          ops.linear(p.l_head, ops.linear(p.v_head, f_s)))
    return ScoreMap(ops.reshape(sim, (h, w)), stage="Q")


def target_relevant_score(p: TbsParams, f_s: Tensor, split: SupportSplit,
                          h: int, w: int) -> ScoreMap:
    """Score each support pixel by its similarity to the support object.

    Uses the identical head instances as :func:`query_relevant_score`.
    """
    if split.object_indices.size == 0:
        raise DegenerateSupportError("support has no foreground pixels")
    f_obj = ops.gather_rows(f_s, split.object_indices)
    recon = cross_reconstruct(p.q_head, p.k_head, p.v_head, f_s, f_obj).recon
    sim = ops.cosine_rows(ops.linear(p.l_head, recon),
                          ops.linear(p.l_head, ops.linear(p.v_head, f_s)))
    return ScoreMap(ops.reshape(sim, (h, w)), stage="T")


def background_relevant_score(rq: ScoreMap, rt: ScoreMap,
                              m_feat: np.ndarray) -> ScoreMap:
    """(R_query - R_target) masked to the support background."""
    mask = np.asarray(m_feat)
    if rq.values.shape != rt.values.shape or rq.values.shape != mask.shape:
        raise ShapeError(
            f"background score: shapes {rq.values.shape} / {rt.values.shape} "
            f"/ {mask.shape}")
    bg = Tensor((mask != 1).astype(rq.values.dtype))
    diff = ops.sub(rq.values, rt.values)
    return ScoreMap(ops.mul(diff, bg), stage="B")


def refine_score(p: TbsParams, rb: ScoreMap) -> ScoreMap:
    """Two 1x1 convolutions over (score, layer-normed score), then sigmoid."""
    h, w = rb.values.shape
    if h * w < 2:
        raise ops.DegenerateInputError("refine_score: need >= 2 pixels")
    flat = ops.reshape(rb.values, (h * w,))
    normed = ops.layer_norm(flat)
    x = ops.concat_cols(ops.reshape(flat, (h * w, 1)),
                        ops.reshape(normed, (h * w, 1)))
    y = ops.linear(p.refine_conv1, x)
    z = ops.linear(p.refine_conv2, y)   # no nonlinearity between the convs
    weights = ops.sigmoid(z)
    return ScoreMap(ops.reshape(weights, (h, w)), stage="refined")


def pin_foreground(refined: ScoreMap, m_feat: np.ndarray) -> ScoreMap:
    """Overwrite foreground positions with exactly 1; gradient only flows
    through background positions."""
    mask = np.asarray(m_feat)
    if refined.values.shape != mask.shape:
        raise ShapeError(
            f"pin_foreground: shapes {refined.values.shape} vs {mask.shape}")
    fg = Tensor((mask == 1).astype(refined.values.dtype))
    bg = Tensor((mask != 1).astype(refined.values.dtype))
    pinned = ops.add(ops.mul(refined.values, bg), fg)
    return ScoreMap(pinned, stage="pinned")


def adapt_support(f_s: Tensor, pinned: ScoreMap) -> Tensor:
    """Scale support features [C,H,W] by the pinned weights, broadcast over
    channels."""
    return ops.scale_spatial(f_s, pinned.values)


@dataclass
class Ablation:
    """On/off switches for the two scoring paths."""

    use_qs: bool = True
    use_ts: bool = True

    @property
    def bypass(self) -> bool:
        return not (self.use_qs or self.use_ts)


@dataclass
class TbsOutput:
    adapted: Tensor                        # [C,H,W]
    scores: Dict[str, Optional[ScoreMap]]  # keys: Q, T, B, refined, pinned


def tbs_forward(p: TbsParams, f_q: Tensor, f_s: Tensor, m_feat: np.ndarray,
                ablation: Optional[Ablation] = None) -> TbsOutput:
    """Full suppression pipeline for one support shot.

    ``f_q`` is query features as rows [N_q x C]; ``f_s`` is the support
    feature map [C,H,W]; ``m_feat`` the binary support mask at feature
    resolution. A disabled score term is replaced by zeros; with both terms
    disabled the pipeline is bypassed and the support features pass through
    unchanged.
    """
    if ablation is None:
        ablation = Ablation()
    c, h, w = f_s.shape
    mask = np.asarray(m_feat)
    if mask.shape != (h, w):
        raise ShapeError(f"tbs_forward: mask {mask.shape} vs features {f_s.shape}")
    if not (mask == 1).any():
        raise DegenerateSupportError("support has no foreground pixels")
    if ablation.bypass:
        return TbsOutput(adapted=f_s, scores={k: None for k in SCORE_STAGES})

    f_s_rows = ops.chw_to_rows(f_s)
    split = split_support(mask)
    zeros = lambda stage: ScoreMap(Tensor(np.zeros((h, w), dtype=f_s.dtype)), stage)
    rq = (query_relevant_score(p, f_s_rows, f_q, h, w)
          if ablation.use_qs else zeros("Q"))
    rt = (target_relevant_score(p, f_s_rows, split, h, w)
          if ablation.use_ts else zeros("T"))
    rb = background_relevant_score(rq, rt, mask)
    refined = refine_score(p, rb)
    pinned = pin_foreground(refined, mask)
    adapted = adapt_support(f_s, pinned)
    return TbsOutput(adapted=adapted,
                     scores={"Q": rq, "T": rt, "B": rb,
                             "refined": refined, "pinned": pinned})
