"""Score-map and episode rendering for the visualize command.

Per support shot the background-relevant score plane and its pinned,
refined counterpart are written as P5 graymaps (score range linearly mapped
to 0..255, the range recorded in a sidecar text file); the query and
support images are written as P6 pixmaps with mask contours in red.
"""

from __future__ import annotations

import os
from typing import List, Optional

from .episodes import Episode
from .netpbm import overlay_contour, pgm_bytes, ppm_bytes, scale_to_bytes
from .scoring import Ablation
from .training import ModelParams, forward_episode


def render_episode_files(params: ModelParams, episode: Episode,
                         ablation: Optional[Ablation] = None) -> dict:
    """Produce {relative filename: bytes} for one episode's visualization."""
    fwd = forward_episode(params, episode, ablation)
    files = {}
    files["query.ppm"] = ppm_bytes(
        overlay_contour(episode.query_image, episode.query_mask))
    for j, (img, mask) in enumerate(episode.supports):
        files[f"support{j}.ppm"] = ppm_bytes(overlay_contour(img, mask))
        scores = fwd.tbs_scores[j]
        for stage, label in (("B", "score_bg"), ("pinned", "score_pinned")):
            smap = scores.get(stage)
            if smap is None:
                continue
            gray, lo, hi = scale_to_bytes(smap.values.data)
            files[f"shot{j}_{label}.pgm"] = pgm_bytes(gray)
            files[f"shot{j}_{label}_range.txt"] = (
                f"min = {lo!r}\nmax = {hi!r}\n").encode("ascii")
    return files


def write_episode_files(out_dir, params: ModelParams, episode: Episode,
                        ablation: Optional[Ablation] = None) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    files = render_episode_files(params, episode, ablation)
    written = []
    for name in sorted(files):
        path = os.path.join(out_dir, name)
        with open(path, "wb") as fh:
            fh.write(files[name])
        written.append(path)
    return written
