"""Layer-averaged point matching between frame and identity image tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .numerics import argmax_rows, cosine_similarity_matrix


@dataclass(frozen=True)
class MatchResult:
    map_star: np.ndarray  # frame token index -> identity token index
    s_max: np.ndarray     # averaged cosine similarity of each matched pair

    def __post_init__(self):
        if len(self.map_star) != len(self.s_max):
            raise InputError("map_star and s_max lengths differ")

    @classmethod
    def identity(cls, n: int) -> "MatchResult":
        return cls(np.arange(n, dtype=np.int64), np.ones(n))


def averaged_similarity(frame_attn_outs, identity_attn_outs) -> np.ndarray:
    if len(frame_attn_outs) == 0:
        raise InputError("match_points needs at least one layer")
    if len(frame_attn_outs) != len(identity_attn_outs):
        raise InputError(
            f"{len(frame_attn_outs)} frame layers vs {len(identity_attn_outs)} identity layers"
        )
    total = None
    for f, i in zip(frame_attn_outs, identity_attn_outs):
        f, i = np.asarray(f), np.asarray(i)
        if f.ndim != 2 or i.ndim != 2 or f.shape[1] != i.shape[1]:
            raise InputError(f"layer shapes differ: {f.shape} vs {i.shape}")
        if total is not None and total.shape != (len(f), len(i)):
            raise InputError("token counts change across layers")
        sim = cosine_similarity_matrix(f, i)
        total = sim if total is None else total + sim
    return total / len(frame_attn_outs)


def match_points(frame_attn_outs, identity_attn_outs) -> MatchResult:
    """Match every frame token to the identity token of highest similarity.

    Cosine similarities are computed per layer and averaged over layers
    before the argmax, so one noisy layer cannot decide the match alone.
    Ties go to the lowest identity index.
    """
    sim = averaged_similarity(frame_attn_outs, identity_attn_outs)
    idx, val = argmax_rows(sim)
    return MatchResult(idx, val)


def matching_error(result: MatchResult, ground_truth, h: int, w: int) -> float:
    """Mean squared grid distance between matched and true identity positions."""
    pred = np.asarray(result.map_star)
    gt = np.asarray(ground_truth)
    if pred.shape != gt.shape:
        raise InputError(f"{pred.shape} matches vs {gt.shape} ground-truth entries")
    for arr in (pred, gt):
        if arr.size and (arr.min() < 0 or arr.max() >= h * w):
            raise InputError(f"token index outside the {h}x{w} grid")
    pr, pc = np.divmod(pred, w)
    gr, gc = np.divmod(gt, w)
    return float(np.mean((pr - gr) ** 2 + (pc - gc) ** 2)) if pred.size else 0.0
