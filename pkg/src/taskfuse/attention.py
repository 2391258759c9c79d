"""Shift-window self-attention over (C, H, W) feature maps.

Feature maps are cut into non-overlapping w x w windows and attention runs
independently inside each window.  Consecutive blocks alternate between an
unshifted and a half-window cyclic shift; the shifted variant masks pairs
of pixels that wrapped in from different pre-shift regions so attention
never crosses the original image boundary.  A learnable relative-position
bias table, indexed by the in-window offset pair, is added to the logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from taskfuse import tensor as T
from taskfuse.tensor import DimensionError, Tensor

__all__ = [
    "AttentionParams",
    "ShiftConfig",
    "MASK_SENTINEL",
    "window_partition",
    "window_reverse",
    "shift_mask",
    "relative_index",
    "attention_probs",
    "swsa",
]

# Large negative logit standing in for -inf; keeps softmax finite.
MASK_SENTINEL = -100.0


@dataclass
class AttentionParams:
    """Projection weights for one windowed-attention layer.

    `bias_table` has shape (heads, (2w-1)^2), one row per head indexed by
    the flattened relative offset in [-(w-1), w-1]^2.
    """

    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    bias_table: Tensor
    heads: int
    window: int


@dataclass
class ShiftConfig:
    shift: int = 0


def window_partition(x: Tensor, w: int) -> Tensor:
    """(C, H, W) -> (nWin, w*w, C), windows and in-window pixels row-major."""
    C, H, W = x.data.shape
    if H % w or W % w:
        raise DimensionError(f"window_partition: extents of {x.shape} not divisible by window {w}")
    t = T.permute(x, (1, 2, 0))
    t = T.reshape(t, (H // w, w, W // w, w, C))
    t = T.permute(t, (0, 2, 1, 3, 4))
    return T.reshape(t, ((H // w) * (W // w), w * w, C))


def window_reverse(win: Tensor, H: int, W: int) -> Tensor:
    """Exact inverse of `window_partition` back to (C, H, W)."""
    n_win, t2, C = win.data.shape
    w = int(round(t2**0.5))
    if w * w != t2 or n_win * t2 != H * W:
        raise DimensionError(f"window_reverse: {win.shape} does not tile ({H}, {W})")
    t = T.reshape(win, (H // w, W // w, w, w, C))
    t = T.permute(t, (0, 2, 1, 3, 4))
    t = T.reshape(t, (H, W, C))
    return T.permute(t, (2, 0, 1))


@lru_cache(maxsize=None)
def relative_index(w: int) -> np.ndarray:
    """(w*w, w*w) table index of pairwise in-window relative offsets."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    return (rel[0] + w - 1) * (2 * w - 1) + (rel[1] + w - 1)


@lru_cache(maxsize=None)
def _mask_array(H: int, W: int, w: int, shift: int) -> np.ndarray:
    n_win = (H // w) * (W // w)
    if shift == 0:
        return np.zeros((n_win, w * w, w * w), dtype=np.float32)
    # label the post-shift regions, then forbid attention across labels
    labels = np.zeros((H, W), dtype=np.int64)
    cnt = 0
    spans = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    for hs in spans:
        for ws in spans:
            labels[hs, ws] = cnt
            cnt += 1
    lab = (
        labels.reshape(H // w, w, W // w, w)
        .transpose(0, 2, 1, 3)
        .reshape(n_win, w * w)
    )
    diff = lab[:, :, None] != lab[:, None, :]
    return np.where(diff, np.float32(MASK_SENTINEL), np.float32(0.0))


def shift_mask(H: int, W: int, w: int, shift: int) -> Tensor:
    """Additive (nWin, w*w, w*w) mask of {0, MASK_SENTINEL} for a shifted grid."""
    if shift >= w:
        raise DimensionError(f"shift_mask: shift {shift} must be smaller than window {w}")
    return Tensor(_mask_array(H, W, w, shift))


def _windowed_qkv(x: Tensor, p: AttentionParams, shift: int):
    C, H, W = x.data.shape
    w = p.window
    if shift:
        x = T.roll(x, (-shift, -shift), (1, 2))
    win = window_partition(x, w)  # (nWin, T, C)
    qkv = T.linear(win, p.qkv_weight, p.qkv_bias)
    q, k, v = T.split(qkv, [C, C, C], axis=-1)
    n_win = win.data.shape[0]
    t2 = w * w
    d = C // p.heads

    def heads(z):
        z = T.reshape(z, (n_win, t2, p.heads, d))
        return T.permute(z, (0, 2, 1, 3))  # (nWin, heads, T, d)

    return heads(q), heads(k), heads(v), n_win, t2, d


def _probs_and_values(x: Tensor, p: AttentionParams, s: ShiftConfig):
    C, H, W = x.data.shape
    if C % p.heads:
        raise DimensionError(f"swsa: channels {C} not divisible by heads {p.heads}")
    w = p.window
    if H % w or W % w:
        raise DimensionError(f"swsa: extents of {x.shape} not divisible by window {w}")
    q, k, v, n_win, t2, d = _windowed_qkv(x, p, s.shift)
    q = T.scale(q, d**-0.5)
    logits = T.matmul(q, T.permute(k, (0, 1, 3, 2)))
    bias = T.gather_rows(p.bias_table, relative_index(w))  # (heads, T, T)
    logits = T.add(logits, bias)
    if s.shift:
        logits = T.add_const(logits, _mask_array(H, W, w, s.shift)[:, None, :, :])
    return T.softmax(logits), v, n_win, t2, C


def attention_probs(x: Tensor, p: AttentionParams, s: ShiftConfig) -> Tensor:
    """Post-softmax attention probabilities, shape (nWin, heads, T, T)."""
    return _probs_and_values(x, p, s)[0]


def swsa(x: Tensor, p: AttentionParams, s: ShiftConfig) -> Tensor:
    """Windowed multi-head self-attention on (C, H, W), shape preserving."""
    _, H, W = x.data.shape
    att, v, n_win, t2, C = _probs_and_values(x, p, s)
    out = T.matmul(att, v)  # (nWin, heads, T, d)
    out = T.permute(out, (0, 2, 1, 3))
    out = T.reshape(out, (n_win, t2, C))
    out = T.linear(out, p.proj_weight, p.proj_bias)
    y = window_reverse(out, H, W)
    if s.shift:
        y = T.roll(y, (s.shift, s.shift), (1, 2))
    return y
