"""End-to-end model assembly, episodic loss, and the Adam training loop.

All learnable parameters live in ``ModelParams``; ``named_parameters``
gives the stable ordering used by the optimizer and the checkpoint format.
Training is deterministic given (config, seed): parameters, episode
streams, and batch composition all derive from the run seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .encoder import EncoderParams, extract_features, init_encoder_params
from .episodes import (Episode, GenConfig, derive_seed, downsample_mask,
                       fold_split, generate_episode)
from .head import HeadParams, init_head_params, predict_mask
from .scoring import Ablation, TbsParams, init_tbs_params, tbs_forward
from .tensor import Tape, Tensor, backward

CHANNELS = 32

# Stream tags for per-purpose rng derivation from the run seed.
PARAM_STREAM = 0
TRAIN_STREAM = 1
EVAL_STREAM = 2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    """A loss or gradient went non-finite; message names the episode seed."""


@dataclass
class ModelParams:
    encoder: EncoderParams
    tbs: TbsParams
    head: HeadParams

    def named_parameters(self) -> Dict[str, Tensor]:
        e, t, h = self.encoder, self.tbs, self.head
        out: Dict[str, Tensor] = {}
        for name, lin in (("encoder.patch_embed", e.patch_embed),
                          ("tbs.q_head", t.q_head), ("tbs.k_head", t.k_head),
                          ("tbs.v_head", t.v_head), ("tbs.l_head", t.l_head),
                          ("tbs.refine_conv1", t.refine_conv1),
                          ("tbs.refine_conv2", t.refine_conv2),
                          ("head.q_head", h.q_head), ("head.k_head", h.k_head)):
            out[f"{name}.weight"] = lin.weight
            if lin.bias is not None:
                out[f"{name}.bias"] = lin.bias
        for name, conv in (("encoder.conv1", e.conv1), ("encoder.conv2", e.conv2)):
            out[f"{name}.weight"] = conv.weight
            out[f"{name}.bias"] = conv.bias
        return out


def init_model(seed: int) -> ModelParams:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, PARAM_STREAM))))
    return ModelParams(encoder=init_encoder_params(rng),
                       tbs=init_tbs_params(rng, CHANNELS),
                       head=init_head_params(rng, CHANNELS))


@dataclass
class TrainState:
    params: ModelParams
    step: int = 0
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.named_parameters().items():
            self.adam_m.setdefault(name, np.zeros_like(p.data))
            self.adam_v.setdefault(name, np.zeros_like(p.data))


@dataclass
class EpisodeForward:
    """Everything one episode forward produces, for loss, metrics, and plots."""

    probs: Tensor                       # [8x8] in (0,1)
    attn: Tensor                        # [N_q x K*N_s]
    gt_feat: np.ndarray                 # [8x8] uint8
    support_masks_feat: List[np.ndarray]
    tbs_scores: List[dict]              # per shot: stage -> ScoreMap or None


def forward_episode(params: ModelParams, episode: Episode,
                    ablation: Optional[Ablation] = None) -> EpisodeForward:
    """Encode, suppress support background, and aggregate mask values."""
    if ablation is None:
        ablation = Ablation()
    f_q_map = extract_features(params.encoder, episode.query_image)
    f_q = ops.chw_to_rows(f_q_map)
    adapted = []
    support_masks = []
    scores = []
    for img, mask in episode.supports:
        m_feat = downsample_mask(mask)
        f_s_map = extract_features(params.encoder, img)
        out = tbs_forward(params.tbs, f_q, f_s_map, m_feat, ablation)
        adapted.append((ops.chw_to_rows(out.adapted), m_feat))
        support_masks.append(m_feat)
        scores.append(out.scores)
    probs, attn = predict_mask(params.head, f_q, adapted)
    gt_feat = downsample_mask(episode.query_mask)
    return EpisodeForward(probs=probs, attn=attn, gt_feat=gt_feat,
                          support_masks_feat=support_masks, tbs_scores=scores)


def episode_loss(params: ModelParams, episode: Episode,
                 ablation: Optional[Ablation] = None) -> Tensor:
    fwd = forward_episode(params, episode, ablation)
    target = Tensor(fwd.gt_feat.astype(fwd.probs.data.dtype))
    return ops.bce_loss(fwd.probs, target)


def zero_grads(params: ModelParams) -> None:
    for p in params.named_parameters().values():
        p.zero_grad()


def adam_step(state: TrainState, lr: float) -> None:
    """One Adam update from the gradients currently held by the parameters."""
    state.step += 1
    t = state.step
    for name, p in state.params.named_parameters().items():
        g = p.grad
        if g is None:
            continue
        m = state.adam_m[name] = ADAM_BETA1 * state.adam_m[name] + (1 - ADAM_BETA1) * g
        v = state.adam_v[name] = ADAM_BETA2 * state.adam_v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.data.dtype)


def train_step(state: TrainState, batch: List[Episode], lr: float,
               ablation: Optional[Ablation] = None) -> float:
    """Adam update on the mean loss over a batch of episodes."""
    if not batch:
        raise ValueError("train_step: batch must be non-empty")
    zero_grads(state.params)
    losses = []
    inv = 1.0 / len(batch)
    for episode in batch:
        with Tape() as tape:
            loss = episode_loss(state.params, episode, ablation)
            scaled = ops.scale(loss, inv)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite loss {value} on episode seed {episode.seed}")
        backward(tape, scaled)
        losses.append(value)
    adam_step(state, lr)
    return float(np.mean(losses))


@dataclass
class TrainResult:
    state: TrainState
    loss_log: List[Tuple[int, float]]    # (step, mean batch loss)


def make_train_episode(cfg: GenConfig, run_seed: int, index: int) -> Episode:
    return generate_episode(cfg, derive_seed(run_seed, TRAIN_STREAM, index))


def make_eval_episode(cfg: GenConfig, run_seed: int, index: int) -> Episode:
    return generate_episode(cfg, derive_seed(run_seed, EVAL_STREAM, index))


def run_training(run_seed: int, fold_id: int, steps: int, batch: int,
                 lr: float, shots: int,
                 difficulty_weights: Tuple[float, float, float, float],
                 ablation: Optional[Ablation] = None,
                 checkpoint_every: int = 500,
                 on_checkpoint=None) -> TrainResult:
    """Train on the fold's train classes; deterministic given arguments."""
    split = fold_split(fold_id)
    cfg = GenConfig(shots=shots, class_ids=split.train_classes,
                    difficulty_weights=difficulty_weights)
    state = TrainState(params=init_model(run_seed))
    log: List[Tuple[int, float]] = []
    index = 0
    for step in range(1, steps + 1):
        episodes = []
        for _ in range(batch):
            episodes.append(make_train_episode(cfg, run_seed, index))
            index += 1
        mean_loss = train_step(state, episodes, lr, ablation)
        log.append((step, mean_loss))
        if on_checkpoint is not None and checkpoint_every > 0 \
                and step % checkpoint_every == 0 and step != steps:
            on_checkpoint(state, step)
    return TrainResult(state=state, loss_log=log)
