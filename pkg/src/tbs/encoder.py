"""Desk-scale feature encoder: 4x4 patch embedding followed by two 3x3
convolution stages with ReLU, 32 channels throughout.

The first convolution has stride 2, the second stride 1, so the output
stride is exactly 8 (a 64x64 image becomes an 8x8 feature map).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

PATCH = 4
CHANNELS = 32
IMAGE_SIZE = 64
OUTPUT_STRIDE = 8


@dataclass
class EncoderParams:
    patch_embed: ops.LinearParams    # 16 -> 32
    conv1: ops.ConvParams            # 32 -> 32, stride 2
    conv2: ops.ConvParams            # 32 -> 32, stride 1


def init_encoder_params(rng: np.random.Generator) -> EncoderParams:
    return EncoderParams(
        patch_embed=ops.init_linear(rng, PATCH * PATCH, CHANNELS,
                                    name="encoder.patch_embed"),
        conv1=ops.init_conv(rng, CHANNELS, CHANNELS, name="encoder.conv1"),
        conv2=ops.init_conv(rng, CHANNELS, CHANNELS, name="encoder.conv2"),
    )


def extract_features(p: EncoderParams, image) -> Tensor:
    """[1,64,64] image -> [32,8,8] feature map."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.shape != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"extract_features: need (1,{IMAGE_SIZE},{IMAGE_SIZE}) "
                         f"image, got {x.shape}")
    tokens = ops.extract_patches(x, PATCH)              # [256, 16]
    embedded = ops.linear(p.patch_embed, tokens)        # [256, 32]
    grid = IMAGE_SIZE // PATCH
    fmap = ops.rows_to_chw(embedded, grid, grid)        # [32, 16, 16]
    fmap = ops.relu(ops.conv2d(p.conv1, fmap, stride=2))
    fmap = ops.relu(ops.conv2d(p.conv2, fmap, stride=1))
    return fmap                                         # [32, 8, 8]
