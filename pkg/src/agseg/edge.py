"""Edge prediction head and boundary ground truth.

The head is a single 1x1 convolution plus sigmoid over a low-level feature
map; its output supervises against a boundary map derived from the mask and
also multiplicatively conditions the feature (feat * (1 + edge_prob)) so an
untrained head never silences the stream.

Boundary ground truth is the 3x3 morphological gradient of the binary mask:
a pixel is boundary exactly when its 3x3 neighborhood, clipped to the image,
contains both a 0 and a 1. Equivalently dilate(mask) - erode(mask) where
dilation pads with background and erosion pads with foreground, which keeps
every all-constant mask boundary-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, add, conv2d, mul, sigmoid
from .nn import ParamStore, bce_loss, glorot_init


@dataclass
class EdgeHeadParams:
    """Single-channel 1x1 head over the tapped feature."""

    we: Tensor  # (1, C, 1, 1)
    be: Tensor  # (1,)

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.weight", self.we), (f"{prefix}.bias", self.be)]


def init_edge_head(store: ParamStore, prefix: str, channels: int, rng) -> EdgeHeadParams:
    params = EdgeHeadParams(
        we=glorot_init((1, channels, 1, 1), channels, 1, rng),
        be=Tensor(np.zeros(1, dtype=np.float32)),
    )
    for name, tensor in params.named(prefix):
        store.add(name, tensor)
    return params


def ea_forward(feat: Tensor, params: EdgeHeadParams) -> tuple[Tensor, Tensor]:
    """Returns (edge_prob of shape (N,1,H,W), conditioned feature)."""
    edge_prob = sigmoid(conv2d(feat, params.we, params.be))
    conditioned = mul(feat, add(edge_prob, 1.0))
    return edge_prob, conditioned


def edge_target_from_mask(mask) -> np.ndarray:
    """3x3 morphological gradient of a binary (N,1,H,W) mask.

    Returns a float32 {0,1} array of the same shape. Gradients never flow
    through targets, so this is plain array math.
    """
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"edge_target_from_mask: expected (N,1,H,W), got {arr.shape}")
    values = np.unique(arr)
    if not np.isin(values, (0.0, 1.0)).all():
        raise ValueError("edge_target_from_mask: mask must be binary (values in {0,1})")
    n, _, h, w = arr.shape
    flat = arr.reshape(n, h, w)
    dil_pad = np.pad(flat, ((0, 0), (1, 1), (1, 1)), constant_values=0.0)
    ero_pad = np.pad(flat, ((0, 0), (1, 1), (1, 1)), constant_values=1.0)
    dilated = sliding_window_view(dil_pad, (3, 3), axis=(1, 2)).max(axis=(-2, -1))
    eroded = sliding_window_view(ero_pad, (3, 3), axis=(1, 2)).min(axis=(-2, -1))
    boundary = (dilated - eroded).reshape(n, 1, h, w)
    return boundary.astype(np.float32)


def pool_target(target: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a (N,1,H,W) boundary map so edges survive downsampling."""
    if factor == 1:
        return target
    n, c, h, w = target.shape
    if h % factor or w % factor:
        raise ValueError(f"pool_target: {h}x{w} not divisible by {factor}")
    blocks = target.reshape(n, c, h // factor, factor, w // factor, factor)
    return blocks.max(axis=(3, 5))


def edge_loss(edge_prob: Tensor, target) -> Tensor:
    """BCE between predicted edge probabilities and the boundary map."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    return bce_loss(edge_prob, t)
