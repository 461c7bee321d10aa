"""Binary netpbm writers: P5 graymaps for score planes, P6 pixmaps for
image overlays. Output bytes are a pure function of the input arrays."""

from __future__ import annotations

import numpy as np


def pgm_bytes(gray: np.ndarray) -> bytes:
    g = np.asarray(gray, dtype=np.uint8)
    if g.ndim != 2:
        raise ValueError(f"P5 needs an H x W array, got shape {g.shape}")
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + g.tobytes()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    a = np.asarray(rgb, dtype=np.uint8)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"P6 needs an H x W x 3 array, got shape {a.shape}")
    h, w, _ = a.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + a.tobytes()


def write_pgm(path, gray: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(gray))


def write_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(rgb))


def scale_to_bytes(values: np.ndarray) -> tuple:
    """Linear map of a score plane's [min, max] range to 0..255.

    A constant plane sits at the top of its (empty) range, so it maps to
    255. Returns (uint8 array, lo, hi) so the range can be recorded in a
    sidecar file.
    """
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min())
    hi = float(v.max())
    if hi - lo < 1e-12:
        return np.full(v.shape, 255, dtype=np.uint8), lo, hi
    scaled = np.rint((v - lo) / (hi - lo) * 255.0)
    return scaled.astype(np.uint8), lo, hi


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background (image border counts)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def overlay_contour(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grayscale [0,1] image to RGB uint8 with the mask contour in red."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    gray = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    contour = mask_contour(mask)
    rgb[contour] = (255, 0, 0)
    return rgb
