"""Point-tracking attention and adaptive token merge for frame images.

Frame foreground tokens attend, in addition to their own sequence, to the
identity tokens they were matched with. Those identity keys are stored
without positional encoding and rotated here to the *frame* coordinates of
the tokens that track them, so the attention logit no longer pays the
distance penalty of the original layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import MatchResult
from .errors import InputError
from .masks import ForegroundMask
from .model import attend
from .numerics import NEG_INF, RopeConfig, as_tensor, check_coords, rope2d_apply


@dataclass(frozen=True)
class GatherPlan:
    c_fg_frm: np.ndarray
    c_fg_id: np.ndarray
    s_conf: np.ndarray
    include_bg: bool
    c_bg_id: np.ndarray

    @property
    def n_fg(self) -> int:
        return len(self.c_fg_frm)

    @property
    def n_bg(self) -> int:
        return len(self.c_bg_id) if self.include_bg else 0


@dataclass(frozen=True)
class ExtendedAttentionInputs:
    q: np.ndarray            # (L, width), positioned
    k: np.ndarray            # (L + n_fg + n_bg, width)
    v: np.ndarray
    mask: np.ndarray         # (L, L + n_fg + n_bg) in {0, NEG_INF}
    n_heads: int

    def __post_init__(self):
        if self.mask.shape != (self.q.shape[0], self.k.shape[0]):
            raise InputError(f"mask {self.mask.shape} does not match q {self.q.shape} / k {self.k.shape}")


def build_gather_plan(frame_mask: ForegroundMask, identity_mask: ForegroundMask,
                      match: MatchResult, include_bg: bool) -> GatherPlan:
    if (frame_mask.h, frame_mask.w) != (identity_mask.h, identity_mask.w):
        raise InputError("frame and identity masks cover different grids")
    if len(match.map_star) != frame_mask.bits.size:
        raise InputError(f"{len(match.map_star)} matches for {frame_mask.bits.size} tokens")
    c_fg_frm = frame_mask.fg_indices
    c_fg_id = np.asarray(match.map_star, dtype=np.int64)[c_fg_frm]
    s_conf = np.asarray(match.s_max, dtype=np.float64)[c_fg_frm]
    c_bg_id = identity_mask.bg_indices if include_bg else np.zeros(0, dtype=np.int64)
    return GatherPlan(c_fg_frm, c_fg_id, s_conf, include_bg, c_bg_id)


def reencode_identity_keys(k_no_pos_rows, target_coords, rope: RopeConfig,
                           h: int, w: int, skip_rope: bool = False) -> np.ndarray:
    """Rotate position-free identity keys to the frame positions that track them.

    ``skip_rope`` exists only to let the self-check demonstrate that the
    relative-position test catches a missing re-encoding.
    """
    k = as_tensor(k_no_pos_rows)
    coords = check_coords(target_coords, h, w)
    if len(coords) != len(k):
        raise InputError(f"{len(k)} keys but {len(coords)} target coordinates")
    if skip_rope:
        return k.copy()
    return rope2d_apply(k, coords, rope)


def build_attention_mask(plan: GatherPlan, frame_mask: ForegroundMask, text_len: int) -> np.ndarray:
    """Additive mask over cat[native, identity fg, identity bg] keys.

    Native keys are visible to every query. Identity foreground keys are
    visible to frame foreground image queries only, identity background
    keys to frame background image queries only. Text queries see no
    identity keys.
    """
    hw = frame_mask.bits.size
    L = text_len + hw
    n_fg, n_bg = plan.n_fg, plan.n_bg
    mask = np.zeros((L, L + n_fg + n_bg), dtype=np.float32)
    is_fg = np.zeros(L, dtype=bool)
    is_fg[text_len:] = frame_mask.bits.astype(bool)
    is_bg = np.zeros(L, dtype=bool)
    is_bg[text_len:] = ~frame_mask.bits.astype(bool)
    mask[~is_fg, L:L + n_fg] = NEG_INF
    mask[~is_bg, L + n_fg:] = NEG_INF
    return mask


def point_tracking_attention(inputs: ExtendedAttentionInputs) -> np.ndarray:
    for name in ("q", "k", "v"):
        if not np.isfinite(getattr(inputs, name)).all():
            raise InputError(f"non-finite values in extended attention {name}")
    return attend(inputs.q, inputs.k, inputs.v, inputs.n_heads, inputs.mask)


def adaptive_merge(h_frame_fg, h_identity_at_matches, s_conf, alpha: float) -> np.ndarray:
    """Per-token convex blend ``(1 - a*s) * frame + a*s * identity``.

    ``s_conf`` is clamped to [0, 1] first so the weights stay convex. With
    ``alpha == 0`` the frame rows are returned unchanged.
    """
    frame = as_tensor(h_frame_fg)
    ident = as_tensor(h_identity_at_matches)
    if frame.shape != ident.shape:
        raise InputError(f"merge sources differ in shape: {frame.shape} vs {ident.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return frame.copy()
    s = np.clip(np.asarray(s_conf, dtype=np.float64), 0.0, 1.0).reshape(-1, 1)
    weight = (alpha * s).astype(np.float32)
    return ((np.float32(1.0) - weight) * frame + weight * ident).astype(np.float32)


def extend_attention(bundle, plan: GatherPlan, frame_mask: ForegroundMask,
                     id_k_no_pos, id_v, rope: RopeConfig, h: int, w: int,
                     skip_rope: bool = False) -> ExtendedAttentionInputs:
    """Assemble the extended keys/values/mask for one single-block call.

    ``id_k_no_pos`` and ``id_v`` are the cached identity image rows.
    Background identity keys keep their own (original) positions.
    """
    frm_coords = np.stack(np.divmod(plan.c_fg_frm, w), axis=1)
    k_fg = reencode_identity_keys(id_k_no_pos[plan.c_fg_id], frm_coords, rope, h, w, skip_rope)
    ks, vs = [bundle.k_with_pos, k_fg], [bundle.v, id_v[plan.c_fg_id]]
    if plan.include_bg:
        bg_coords = np.stack(np.divmod(plan.c_bg_id, w), axis=1)
        ks.append(rope2d_apply(id_k_no_pos[plan.c_bg_id], bg_coords, rope))
        vs.append(id_v[plan.c_bg_id])
    mask = build_attention_mask(plan, frame_mask, bundle.text_len)
    return ExtendedAttentionInputs(bundle.q, np.concatenate(ks), np.concatenate(vs),
                                   mask, bundle.n_heads)
