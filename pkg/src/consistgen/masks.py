"""Foreground masks from image-to-text attention, plus morphology and IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError


@dataclass(frozen=True)
class ForegroundMask:
    bits: np.ndarray  # (h*w,) uint8, row-major grid order
    h: int
    w: int

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8).reshape(-1)
        if bits.size != self.h * self.w:
            raise InputError(f"{bits.size} mask bits for a {self.h}x{self.w} grid")
        if bits.max(initial=0) > 1:
            raise InputError("mask bits must be 0 or 1")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_grid(cls, grid) -> "ForegroundMask":
        grid = np.asarray(grid)
        return cls(grid.astype(np.uint8).reshape(-1), grid.shape[0], grid.shape[1])

    @classmethod
    def full(cls, h: int, w: int, value: int = 1) -> "ForegroundMask":
        return cls(np.full(h * w, value, dtype=np.uint8), h, w)

    @property
    def grid(self) -> np.ndarray:
        return self.bits.reshape(self.h, self.w)

    @property
    def fg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def bg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 0)

    @property
    def fg_fraction(self) -> float:
        return float(self.bits.mean())


def text_attention_means(attn_logits, l_bg: int, l_fg: int):
    """Mean image->background and image->foreground attention per image token.

    ``attn_logits`` is a sequence of arrays whose last two axes are
    (image queries, text keys); any leading axes (heads) are averaged
    together with the sequence (layers). The softmax runs over the first
    ``l_bg + l_fg`` keys only.
    """
    if l_bg < 1 or l_fg < 1:
        raise InputError(f"need l_bg >= 1 and l_fg >= 1, got {l_bg}, {l_fg}")
    n_txt = l_bg + l_fg
    bg_sum = fg_sum = None
    count = 0
    for logits in attn_logits:
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape[-1] < n_txt:
            raise InputError(f"l_bg + l_fg = {n_txt} exceeds {logits.shape[-1]} text keys")
        z = logits[..., :n_txt]
        z = z - z.max(axis=-1, keepdims=True)
        a = np.exp(z)
        a /= a.sum(axis=-1, keepdims=True)
        a = a.reshape(-1, a.shape[-2], n_txt)
        bg = a[..., :l_bg].mean(axis=-1).sum(axis=0)
        fg = a[..., l_bg:].mean(axis=-1).sum(axis=0)
        bg_sum = bg if bg_sum is None else bg_sum + bg
        fg_sum = fg if fg_sum is None else fg_sum + fg
        count += a.shape[0]
    if count == 0:
        raise InputError("no attention layers given")
    return bg_sum / count, fg_sum / count


def extract_raw_mask(attn_logits, l_bg: int, l_fg: int, h: int, w: int) -> ForegroundMask:
    """Foreground where mean attention to foreground words strictly beats background."""
    bg, fg = text_attention_means(attn_logits, l_bg, l_fg)
    if bg.size != h * w:
        raise InputError(f"{bg.size} image queries for a {h}x{w} grid")
    return ForegroundMask((fg > bg).astype(np.uint8), h, w)


def morph_refine(mask: ForegroundMask, h: int, w: int) -> ForegroundMask:
    """3x3 erosion then 5x5 dilation; pixels outside the grid count as background."""
    if (mask.h, mask.w) != (h, w):
        raise InputError(f"mask is {mask.h}x{mask.w}, expected {h}x{w}")
    eroded = ndimage.binary_erosion(mask.grid, structure=np.ones((3, 3)), border_value=0)
    dilated = ndimage.binary_dilation(eroded, structure=np.ones((5, 5)), border_value=0)
    return ForegroundMask.from_grid(dilated)


def mask_iou(a: ForegroundMask, b: ForegroundMask) -> float:
    if (a.h, a.w) != (b.h, b.w):
        raise InputError(f"mask extents differ: {a.h}x{a.w} vs {b.h}x{b.w}")
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.bits & b.bits) / union
