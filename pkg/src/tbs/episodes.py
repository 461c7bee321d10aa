"""Synthetic few-shot segmentation episodes over eight grayscale shape classes.

Episodes are engineered to reproduce two disruptive support-background
scenarios: backgrounds holding shapes absent from the query
(``irrelevant_bg``) and backgrounds holding a designated lookalike of the
target class (``target_similar_bg``); ``mixed`` has one of each and
``clean`` has none. Lookalikes stand in for literal target-class shapes so
ground-truth masks stay exact.

Randomness: numpy ``PCG64`` seeded through ``SeedSequence``. Per-episode
seeds derive from (run seed, stream tag, episode index), so generation is
reproducible across platforms and embarrassingly parallel across indices.
All rng draws for one episode come from its own stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

CLASS_NAMES = ("disk", "square", "triangle", "ring", "cross",
               "diamond", "h_bar", "v_bar")
NUM_CLASSES = len(CLASS_NAMES)
# Designated near-confusable partner per class, used by target_similar_bg.
LOOKALIKE = {0: 3, 3: 0, 1: 5, 5: 1, 2: 4, 4: 2, 6: 7, 7: 6}

DIFFICULTIES = ("clean", "irrelevant_bg", "target_similar_bg", "mixed")

FEATURE_SIZE = 8          # feature-resolution cells per side
MASK_THRESHOLD = 0.5      # foreground fraction for a downsampled cell
NOISE_SIGMA = 0.05
MAX_EPISODE_TRIES = 100
PLACEMENT_TRIES = 50
PLACEMENT_GAP = 2

DUMP_MAGIC = b"TBSE"
DUMP_VERSION = 1


class GenerationError(RuntimeError):
    """The generator config is unsatisfiable or rejection sampling ran out."""


@dataclass
class GenConfig:
    image_size: int = 64
    shots: int = 1
    class_ids: Tuple[int, ...] = tuple(range(NUM_CLASSES))
    difficulty_weights: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    noise_sigma: float = NOISE_SIGMA


@dataclass
class PlacedShape:
    class_id: int
    cy: int
    cx: int
    half: int
    intensity: float
    role: str   # "target" or "distractor"


@dataclass
class ImageLayout:
    background: float
    shapes: List[PlacedShape] = field(default_factory=list)


@dataclass
class Episode:
    """One task: a query pair plus K support pairs sharing a category."""

    category: int
    difficulty: str
    query_image: np.ndarray            # [1,H,W] float32 in [0,1]
    query_mask: np.ndarray             # [H,W] uint8
    supports: List[Tuple[np.ndarray, np.ndarray]]
    query_layout: ImageLayout
    support_layouts: List[ImageLayout]
    seed: int = 0


@dataclass
class FoldSplit:
    fold_id: int
    train_classes: Tuple[int, ...]
    test_classes: Tuple[int, ...]


def fold_split(fold_id: int) -> FoldSplit:
    """Four folds of two classes each; test = {2f, 2f+1}, train = the rest."""
    if fold_id not in (0, 1, 2, 3):
        raise ValueError(f"fold_id must be in 0..3, got {fold_id}")
    test = (2 * fold_id, 2 * fold_id + 1)
    train = tuple(c for c in range(NUM_CLASSES) if c not in test)
    return FoldSplit(fold_id=fold_id, train_classes=train, test_classes=test)


def derive_seed(run_seed: int, stream: int, index: int) -> int:
    """Stable per-episode seed from (run seed, stream tag, episode index)."""
    ss = np.random.SeedSequence((run_seed, stream, index))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# rasterization


def rasterize_shape(image_size: int, class_id: int, cy: int, cx: int,
                    half: int) -> np.ndarray:
    """Binary pixel mask of one shape; deterministic from its parameters."""
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    dy = ys - cy
    dx = xs - cx
    name = CLASS_NAMES[class_id]
    if name == "disk":
        m = dy * dy + dx * dx <= half * half
    elif name == "square":
        m = np.maximum(np.abs(dy), np.abs(dx)) <= half
    elif name == "triangle":
        m = (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    elif name == "ring":
        inner = max(2, half // 2)
        r2 = dy * dy + dx * dx
        m = (r2 <= half * half) & (r2 >= inner * inner)
    elif name == "cross":
        t = max(1, half // 3)
        box = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        m = box & ((np.abs(dy) <= t) | (np.abs(dx) <= t))
    elif name == "diamond":
        m = np.abs(dy) + np.abs(dx) <= half
    elif name == "h_bar":
        t = max(1, half // 3)
        m = (np.abs(dy) <= t) & (np.abs(dx) <= half)
    elif name == "v_bar":
        t = max(1, half // 3)
        m = (np.abs(dx) <= t) & (np.abs(dy) <= half)
    else:  # pragma: no cover
        raise ValueError(f"unknown class {class_id}")
    return m.astype(np.uint8)


def rasterize_target_mask(image_size: int, layout: ImageLayout) -> np.ndarray:
    """Rebuild the ground-truth mask from layout metadata (targets only)."""
    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    for s in layout.shapes:
        if s.role == "target":
            mask |= rasterize_shape(image_size, s.class_id, s.cy, s.cx, s.half)
    return mask


def render_image(image_size: int, layout: ImageLayout,
                 noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Paint background then shapes in placement order; add noise, clamp."""
    img = np.full((image_size, image_size), layout.background, dtype=np.float64)
    for s in layout.shapes:
        m = rasterize_shape(image_size, s.class_id, s.cy, s.cx, s.half).astype(bool)
        img[m] = s.intensity
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


# ---------------------------------------------------------------------------
# mask downsampling


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """Cell = 1 iff the foreground fraction of its block is >= 0.5."""
    m = np.asarray(mask)
    h, w = m.shape
    block = h // FEATURE_SIZE
    frac = m.astype(np.float64).reshape(
        FEATURE_SIZE, block, FEATURE_SIZE, block).mean(axis=(1, 3))
    return (frac >= MASK_THRESHOLD).astype(np.uint8)


# ---------------------------------------------------------------------------
# episode generation


def _boxes_clear(boxes: List[Tuple[int, int, int, int]],
                 cand: Tuple[int, int, int, int]) -> bool:
    y0, y1, x0, x1 = cand
    for (a0, a1, b0, b1) in boxes:
        if y0 <= a1 and a0 <= y1 and x0 <= b1 and b0 <= x1:
            return False
    return True


def _place_shape(rng: np.random.Generator, image_size: int, class_id: int,
                 half_range: Tuple[int, int], role: str,
                 boxes: List[Tuple[int, int, int, int]]) -> Optional[PlacedShape]:
    for _ in range(PLACEMENT_TRIES):
        half = int(rng.integers(half_range[0], half_range[1] + 1))
        lo = half + PLACEMENT_GAP
        hi = image_size - 1 - half - PLACEMENT_GAP
        if hi < lo:
            continue
        cy = int(rng.integers(lo, hi + 1))
        cx = int(rng.integers(lo, hi + 1))
        intensity = float(rng.uniform(0.5, 0.95))
        box = (cy - half - PLACEMENT_GAP, cy + half + PLACEMENT_GAP,
               cx - half - PLACEMENT_GAP, cx + half + PLACEMENT_GAP)
        if _boxes_clear(boxes, box):
            boxes.append(box)
            return PlacedShape(class_id, cy, cx, half, intensity, role)
    return None


def _distractor_classes(rng: np.random.Generator, difficulty: str,
                        category: int) -> List[int]:
    """Distractor classes for one support image (any shape class may occur
    in a background; target and lookalike are excluded from the irrelevant
    pool to keep the scenarios distinct)."""
    look = LOOKALIKE[category]
    irrelevant_pool = [c for c in range(NUM_CLASSES) if c not in (category, look)]
    if difficulty == "clean":
        return []
    if difficulty == "irrelevant_bg":
        picks = rng.choice(len(irrelevant_pool), size=2, replace=False)
        return [irrelevant_pool[i] for i in picks]
    if difficulty == "target_similar_bg":
        return [look]
    if difficulty == "mixed":
        pick = int(rng.integers(0, len(irrelevant_pool)))
        return [irrelevant_pool[pick], look]
    raise GenerationError(f"unknown difficulty {difficulty!r}")


def _build_image(rng: np.random.Generator, cfg: GenConfig, category: int,
                 distractors: List[int]) -> Tuple[ImageLayout, np.ndarray, np.ndarray]:
    size = cfg.image_size
    layout = ImageLayout(background=float(rng.uniform(0.05, 0.30)))
    boxes: List[Tuple[int, int, int, int]] = []
    target = _place_shape(rng, size, category, (6, 14), "target", boxes)
    if target is None:
        raise GenerationError("could not place target shape")
    layout.shapes.append(target)
    for dc in distractors:
        placed = _place_shape(rng, size, dc, (5, 11), "distractor", boxes)
        if placed is None:
            raise GenerationError("could not place distractor shape")
        layout.shapes.append(placed)
    noise = rng.normal(0.0, cfg.noise_sigma, size=(size, size))
    image = render_image(size, layout, noise)
    mask = rasterize_target_mask(size, layout)
    return layout, image, mask


def _mask_ok(mask: np.ndarray) -> bool:
    feat = downsample_mask(mask)
    return bool(feat.any() and (feat == 0).any())


def generate_episode(cfg: GenConfig, seed: int) -> Episode:
    """Deterministically generate one episode from (cfg, seed).

    Rejection sampling (incremented sub-seed, at most 100 tries) guarantees
    every support and query mask keeps at least one foreground and one
    background cell at feature resolution.
    """
    if len(cfg.class_ids) < 2:
        raise GenerationError("need at least 2 classes available")
    if cfg.image_size % FEATURE_SIZE != 0:
        raise GenerationError(f"image size {cfg.image_size} not a multiple "
                              f"of {FEATURE_SIZE}")
    last_error = "rejected by mask constraints"
    for attempt in range(MAX_EPISODE_TRIES):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((seed, attempt))))
        category = int(cfg.class_ids[rng.integers(0, len(cfg.class_ids))])
        weights = np.asarray(cfg.difficulty_weights, dtype=np.float64)
        if weights.min() < 0 or weights.sum() <= 0:
            raise GenerationError(f"bad difficulty weights {cfg.difficulty_weights}")
        difficulty = DIFFICULTIES[rng.choice(len(DIFFICULTIES),
                                             p=weights / weights.sum())]
        try:
            q_layout, q_img, q_mask = _build_image(rng, cfg, category, [])
            supports = []
            s_layouts = []
            for _ in range(cfg.shots):
                dist = _distractor_classes(rng, difficulty, category)
                s_layout, s_img, s_mask = _build_image(rng, cfg, category, dist)
                supports.append((s_img, s_mask))
                s_layouts.append(s_layout)
        except GenerationError as e:
            last_error = str(e)
            continue
        if not _mask_ok(q_mask) or not all(_mask_ok(m) for _, m in supports):
            continue
        return Episode(category=category, difficulty=difficulty,
                       query_image=q_img, query_mask=q_mask,
                       supports=supports, query_layout=q_layout,
                       support_layouts=s_layouts, seed=seed)
    raise GenerationError(
        f"episode generation failed after {MAX_EPISODE_TRIES} tries "
        f"(seed {seed}): {last_error}")


# ---------------------------------------------------------------------------
# episode dump file ("TBSE")
#
# Layout (all integers little-endian):
#   magic "TBSE" | version u32 | count u32 | image_size u32 | shots u32
#   then per episode:
#     category u32 | difficulty u32 (index into DIFFICULTIES)
#     query image  float32[size*size]
#     query mask   uint8[size*size]
#     per shot: image float32[size*size], mask uint8[size*size]


def save_episodes(path, episodes: List[Episode], image_size: int,
                  shots: int) -> None:
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<IIII", DUMP_VERSION, len(episodes),
                             image_size, shots))
        for ep in episodes:
            fh.write(struct.pack("<II", ep.category,
                                 DIFFICULTIES.index(ep.difficulty)))
            fh.write(ep.query_image.astype("<f4").tobytes())
            fh.write(ep.query_mask.astype(np.uint8).tobytes())
            for img, mask in ep.supports:
                fh.write(img.astype("<f4").tobytes())
                fh.write(mask.astype(np.uint8).tobytes())


def load_episodes(path) -> List[Episode]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DUMP_MAGIC:
            raise ValueError(f"bad episode dump magic {magic!r}")
        version, count, size, shots = struct.unpack("<IIII", fh.read(16))
        if version != DUMP_VERSION:
            raise ValueError(f"unsupported episode dump version {version}")
        n = size * size
        episodes = []
        for _ in range(count):
            category, diff_idx = struct.unpack("<II", fh.read(8))
            q_img = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(1, size, size)
            q_mask = np.frombuffer(fh.read(n), dtype=np.uint8).reshape(size, size)
            supports = []
            for _ in range(shots):
                img = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(1, size, size)
                mask = np.frombuffer(fh.read(n), dtype=np.uint8).reshape(size, size)
                supports.append((img, mask))
            episodes.append(Episode(
                category=category, difficulty=DIFFICULTIES[diff_idx],
                query_image=q_img, query_mask=q_mask, supports=supports,
                query_layout=ImageLayout(0.0), support_layouts=[]))
        return episodes
