"""Episodic evaluation over a fold's test classes.

The eval episode stream depends only on (seed, episode index), never on
ablation flags, so ablation grids see identical tasks; the stream signature
hash makes that checkable from run metadata.
"""

from __future__ import annotations

import hashlib
from typing import Optional, Tuple

from .config import RunConfig
from .episodes import GenConfig, derive_seed, fold_split
from .head import averaged_attention
from .metrics import EvalReport, build_fold_report, episode_result
from .scoring import Ablation
from .training import EVAL_STREAM, ModelParams, forward_episode, make_eval_episode

PRED_THRESHOLD = 0.5


def eval_gen_config(cfg: RunConfig) -> GenConfig:
    split = fold_split(cfg.fold)
    return GenConfig(image_size=cfg.image_size, shots=cfg.shots,
                     class_ids=split.test_classes,
                     difficulty_weights=cfg.difficulty_weights)


def episode_seed_signature(cfg: RunConfig) -> str:
    """Hash of the eval episode seed stream, for run metadata."""
    h = hashlib.sha256()
    for i in range(cfg.eval_episodes):
        h.update(str(derive_seed(cfg.seed, EVAL_STREAM, i)).encode())
    return h.hexdigest()


def run_eval(params: ModelParams, cfg: RunConfig,
             ablation: Optional[Ablation] = None,
             episodes: Optional[int] = None) -> Tuple[EvalReport, str]:
    """Evaluate on the test fold; returns (report, episode seed signature)."""
    if ablation is None:
        ablation = Ablation(use_qs=cfg.use_qs, use_ts=cfg.use_ts)
    n = cfg.eval_episodes if episodes is None else episodes
    gen_cfg = eval_gen_config(cfg)
    results = []
    for i in range(n):
        ep = make_eval_episode(gen_cfg, cfg.seed, i)
        fwd = forward_episode(params, ep, ablation)
        pred = fwd.probs.data >= PRED_THRESHOLD
        aa = averaged_attention(fwd.attn.data, fwd.gt_feat,
                                fwd.support_masks_feat)
        results.append(episode_result(ep.category, pred, fwd.gt_feat,
                                      aa_sf_qf=aa.sf_qf, aa_sb_qb=aa.sb_qb,
                                      aa_avg=aa.avg))
    split = fold_split(cfg.fold)
    report = EvalReport(episode_count=n, seed=cfg.seed,
                        use_qs=ablation.use_qs, use_ts=ablation.use_ts)
    report.per_fold[cfg.fold] = build_fold_report(cfg.fold, results,
                                                  split.test_classes)
    return report, episode_seed_signature(cfg)
