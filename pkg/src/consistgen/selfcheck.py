"""Oracle and property checks runnable from the command line.

Every check raises AssertionError with a short explanation on failure.
"""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path

import numpy as np

from . import oracles
from .correspondence import MatchResult, match_points, matching_error
from .diagnostics import (
    accuracy_curve,
    cache_from_tensors,
    cache_to_tensors,
    dump_tensors,
    load_tensors,
    locality_rings,
)
from .masks import ForegroundMask, extract_raw_mask, morph_refine
from .model import Hooks, ModelConfig, build_model, embed_prompt, forward, unified_attention
from .numerics import (
    NEG_INF,
    RopeConfig,
    argmax_rows,
    grid_coords,
    masked_softmax_rows,
    matmul,
    rope2d_apply,
    seeded_rng,
)
from .sampler import (
    SamplerConfig,
    euler_sample,
    run_frame_pass,
    run_identity_pass,
    run_probe_pass,
)
from .tracking import (
    ExtendedAttentionInputs,
    GatherPlan,
    build_attention_mask,
    build_gather_plan,
    point_tracking_attention,
    reencode_identity_keys,
)

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _close(a, b, tol, what):
    err = float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))
    assert err <= tol, f"{what}: max abs diff {err:.3g} > {tol:g}"


@check
def matmul_vs_triple_loop(opts):
    rng = seeded_rng(1)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    _close(matmul(a, b), oracles.naive_matmul(a.astype(np.float32), b.astype(np.float32)), 1e-6, "matmul")


@check
def softmax_column_deletion(opts):
    rng = seeded_rng(2)
    logits = rng.standard_normal((6, 9)).astype(np.float32)
    mask = np.zeros_like(logits)
    mask[:, 4] = NEG_INF
    got = masked_softmax_rows(logits, mask)
    for i in range(6):
        _close(got[i], oracles.softmax_without_columns(logits[i], [4]), 1e-6, f"row {i}")


@check
def argmax_linear_scan(opts):
    a = seeded_rng(3).standard_normal((10, 10))
    idx, val = argmax_rows(a)
    for i in range(10):
        assert (idx[i], val[i]) == oracles.linear_scan_argmax(list(a[i])), f"row {i}"


@check
def rope_relative_position(opts):
    rng = seeded_rng(4)
    cfg = RopeConfig(32)
    for _ in range(100):
        q, k = rng.standard_normal((2, 32))
        c1, c2, shift = rng.integers(0, 16, (3, 2))
        lhs = rope2d_apply(q[None], [c1], cfg)[0] @ rope2d_apply(k[None], [c2], cfg)[0]
        rhs = rope2d_apply(q[None], [c1 + shift], cfg)[0] @ rope2d_apply(k[None], [c2 + shift], cfg)[0]
        assert abs(lhs - rhs) <= 1e-5, f"relative position broken: {lhs} vs {rhs}"


@check
def rng_normal_mean(opts):
    x = seeded_rng(5).standard_normal(100_000)
    assert abs(x.mean()) < 0.02, f"sample mean {x.mean()}"


@check
def weight_variance(opts):
    model = build_model(ModelConfig(d=32))
    var = np.concatenate([w.ravel() for w in model.weights.values()]).var()
    assert abs(var * 32 - 1) < 0.2, f"weight variance {var} vs 1/32"


@check
def prompt_overflow_truncation(opts):
    cfg = ModelConfig(l=6)
    layout = embed_prompt("one two three four five | six seven eight nine | ten", cfg)
    assert layout.l_bg + layout.l_fg <= cfg.l and len(layout.token_ids) == cfg.l
    assert (layout.l_bg, layout.l_fg) == (5, 1), (layout.l_bg, layout.l_fg)


@check
def unified_attention_double_loop(opts):
    cfg = ModelConfig(l=2, h=1, w=2, d=8, n_heads=2)
    rng = seeded_rng(6)
    q, k, v = rng.standard_normal((3, 4, 16)).astype(np.float32)
    bundle = unified_attention(q, k, v, 2, cfg)
    expected = oracles.loop_attention(bundle.q, bundle.k_with_pos, v, 2)
    _close(bundle.attn_out, expected, 1e-5, "unified attention")
    for j, (r, c) in enumerate(grid_coords(1, 2)):
        for hd in range(2):
            want = oracles.rope_pair_rotate(k[2 + j, hd * 8:(hd + 1) * 8], r, c, 8)
            _close(bundle.k_with_pos[2 + j, hd * 8:(hd + 1) * 8], want, 1e-6, "rope rows")


def _toy():
    cfg = ModelConfig()
    return cfg, build_model(cfg), embed_prompt("a quiet gym | a tall man | lifting", cfg)


@check
def passthrough_replace_hook(opts):
    cfg, model, layout = _toy()
    x = seeded_rng(7).standard_normal((cfg.hw, cfg.latent_channels)).astype(np.float32)
    plain = forward(model, x, layout, 0.6)
    hooked = forward(model, x, layout, 0.6, Hooks(replace=lambda s, n, b: b.attn_out), step=3)
    assert np.array_equal(plain, hooked), "pass-through hook changed the output"


@check
def euler_telescoping(opts):
    c = np.full((4, 3), 0.37, dtype=np.float32)
    final, traj = euler_sample(lambda x, lay, s, step: c, None, 11, SamplerConfig(), shape=(4, 3))
    _close(final, traj[0] - c, 1e-5, "constant-velocity Euler")
    assert len(traj) == 51


@check
def dual_observer_cache(opts):
    cfg, model, layout = _toy()
    sc = SamplerConfig(n_steps=6, extract_step=2, apply_until_step=4)
    seen = {}

    def second(step, layer, bundle):
        seen[(step, layer)] = bundle.image_rows("k_no_pos").copy()

    _, cache = run_identity_pass(model, layout, 12, sc)
    euler_sample(model, layout, 12, sc, lambda s: Hooks(observers=(second,)))
    for key, entry in cache.entries.items():
        assert np.array_equal(entry.k_no_pos, seen[key]), f"cache differs from observer at {key}"


@check
def self_matching_probe(opts):
    cfg, model, layout = _toy()
    sc = SamplerConfig(n_steps=20, extract_step=5, apply_until_step=15)
    _, cache = run_identity_pass(model, layout, 3, sc)
    match, mask = run_probe_pass(model, layout, 3, sc, cache)
    assert np.array_equal(match.map_star, np.arange(cfg.hw)), "self-match is not the identity"
    assert np.all(np.abs(match.s_max - 1) < 1e-6)
    assert np.array_equal(mask.bits, cache.mask.bits)


@check
def duplicated_keys_equal_log2_bias(opts):
    # Identity match on the frame's own keys duplicates every image key for
    # foreground queries; that must equal native attention with +ln 2 on those logits.
    cfg, model, layout = _toy()
    rng = seeded_rng(8)
    L, D = cfg.seq_len, cfg.width
    q, k, v = rng.standard_normal((3, L, D)).astype(np.float32)
    bundle = unified_attention(q, k, v, cfg.l, cfg)
    full = ForegroundMask.full(cfg.h, cfg.w)
    plan = build_gather_plan(full, full, MatchResult.identity(cfg.hw), False)
    k_fg = reencode_identity_keys(bundle.image_rows("k_no_pos"), grid_coords(cfg.h, cfg.w),
                                  cfg.rope, cfg.h, cfg.w)
    ext = ExtendedAttentionInputs(bundle.q, np.concatenate([bundle.k_with_pos, k_fg]),
                                  np.concatenate([v, v[cfg.l:]]),
                                  build_attention_mask(plan, full, cfg.l), cfg.n_heads)
    got = point_tracking_attention(ext)
    bias = np.zeros((L, L))
    bias[cfg.l:, cfg.l:] = math.log(2.0)
    d = cfg.d
    expected = np.zeros((L, D))
    for hd in range(cfg.n_heads):
        sl = slice(hd * d, (hd + 1) * d)
        s = bundle.q[:, sl].astype(np.float64) @ bundle.k_with_pos[:, sl].T.astype(np.float64)
        s = s / math.sqrt(d) + bias
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        expected[:, sl] = p @ v[:, sl]
    _close(got, expected, 1e-5, "duplicate-key attention")


@check
def planted_permutation_recovery(opts):
    rng = seeded_rng(9)
    n, D = 64, 64
    perm = rng.permutation(n)
    layers_id, layers_frm = [], []
    for _ in range(3):
        ident = rng.standard_normal((n, D))
        ident /= np.linalg.norm(ident, axis=1, keepdims=True)
        frame = ident[perm] + 0.01 * rng.standard_normal((n, D))
        layers_id.append(ident.astype(np.float32))
        layers_frm.append(frame.astype(np.float32))
    res = match_points(layers_frm, layers_id)
    ref, _ = oracles.brute_force_match(layers_frm, layers_id)
    assert np.array_equal(res.map_star, perm), "planted permutation not recovered"
    assert np.array_equal(res.map_star, ref), "disagrees with brute-force oracle"


def two_layer_disagreement():
    """Frame token 0 against identity tokens (0, 1) with cosines (0.9, 0.5) then (0.5, 0.95)."""
    frame = np.array([[1.0, 0.0, 0.0]])

    def ident(c0, c1):
        return np.array([[c0, math.sqrt(1 - c0 * c0), 0.0], [c1, 0.0, math.sqrt(1 - c1 * c1)]])

    return [frame, frame], [ident(0.9, 0.5), ident(0.5, 0.95)]


@check
def similarity_averaging(opts):
    frames, idents = two_layer_disagreement()
    # (0.5 + 0.95) / 2 > (0.9 + 0.5) / 2
    assert match_points(frames, idents).map_star[0] == 1, "similarities were not averaged"
    assert match_points(frames[:1], idents[:1]).map_star[0] == 0


@check
def matching_error_loop(opts):
    rng = seeded_rng(10)
    pred, gt = rng.integers(0, 64, 64), rng.integers(0, 64, 64)
    got = matching_error(MatchResult(pred, np.zeros(64)), gt, 8, 8)
    assert abs(got - oracles.loop_matching_error(pred, gt, 8)) < 1e-9


@check
def mask_loop_oracle(opts):
    rng = seeded_rng(11)
    layers = [rng.standard_normal((2, 64, 16)) * 2 for _ in range(3)]
    got = extract_raw_mask(layers, 3, 4, 8, 8)
    assert np.array_equal(got.bits, oracles.loop_mask(layers, 3, 4)), "mask disagrees with loop oracle"


@check
def morphology_brute_force(opts):
    full = ForegroundMask.full(5, 5)
    assert morph_refine(full, 5, 5).bits.all(), "5x5 block not restored"
    rng = seeded_rng(12)
    for _ in range(20):
        grid = (rng.random((8, 8)) < 0.6).astype(np.uint8)
        got = morph_refine(ForegroundMask.from_grid(grid), 8, 8).grid
        assert np.array_equal(got, oracles.brute_refine(grid)), "morphology mismatch"


@check
def gather_plan_checkerboard(opts):
    rng = seeded_rng(13)
    bits = (np.add.outer(np.arange(8), np.arange(8)) % 2).astype(np.uint8)
    perm = rng.permutation(64)
    plan = build_gather_plan(ForegroundMask.from_grid(bits), ForegroundMask.full(8, 8),
                             MatchResult(perm, np.ones(64)), False)
    fg_frm, fg_id = oracles.loop_gather(bits.ravel(), perm)
    assert list(plan.c_fg_frm) == fg_frm and list(plan.c_fg_id) == fg_id


@check
def reencoded_key_relative_position(opts):
    # A key stored at a far identity position, re-encoded at the frame query's
    # own coordinate, must score as if query and key were co-located.
    rng = seeded_rng(14)
    rope = RopeConfig(32)
    h = w = 8
    for _ in range(20):
        q, k0 = rng.standard_normal((2, 1, 32)).astype(np.float32)
        frm = rng.integers(0, 4, 2)
        ident = frm + rng.integers(5, 8, 2)
        ident = np.minimum(ident, 7)
        k_new = reencode_identity_keys(k0, [frm], rope, h, w, skip_rope=opts.get("skip_reencode", False))
        frame_logit = float(rope2d_apply(q, [frm], rope)[0] @ k_new[0])
        ident_logit = float(rope2d_apply(q, [ident], rope)[0] @ rope2d_apply(k0, [ident], rope)[0])
        assert abs(frame_logit - ident_logit) <= 1e-5, (
            f"re-encoded logit {frame_logit:.5f} != co-located logit {ident_logit:.5f}"
        )


@check
def attention_mask_hand_table(opts):
    # 2x2 grid, one text token, frame fg pixel 1, identity bg = {0, 2, 3}
    frame = ForegroundMask(np.array([0, 1, 0, 0]), 2, 2)
    plan = GatherPlan(np.array([1]), np.array([3]), np.array([0.9]), True, np.array([0, 2, 3]))
    got = build_attention_mask(plan, frame, 1)
    N = NEG_INF
    want = np.array([
        # native(5)        fg(1) bg(3)
        [0, 0, 0, 0, 0,    N,    N, N, N],  # text
        [0, 0, 0, 0, 0,    N,    0, 0, 0],  # pixel 0 (bg)
        [0, 0, 0, 0, 0,    0,    N, N, N],  # pixel 1 (fg)
        [0, 0, 0, 0, 0,    N,    0, 0, 0],  # pixel 2
        [0, 0, 0, 0, 0,    N,    0, 0, 0],  # pixel 3
    ], dtype=np.float32)
    assert np.array_equal(got, want), "M* differs from hand enumeration"


@check
def pta_loop_oracle(opts):
    rng = seeded_rng(15)
    L, extra, n_heads, width = 6, 4, 2, 8
    q = rng.standard_normal((L, width)).astype(np.float32)
    k = rng.standard_normal((L + extra, width)).astype(np.float32)
    v = rng.standard_normal((L + extra, width)).astype(np.float32)
    mask = np.where(rng.random((L, L + extra)) < 0.3, NEG_INF, np.float32(0))
    mask[:, :L] = 0
    got = point_tracking_attention(ExtendedAttentionInputs(q, k, v, mask, n_heads))
    _close(got, oracles.loop_attention(q, k, v, n_heads, mask), 1e-5, "extended attention")


@check
def ring_binning(opts):
    row = np.full(64, 1 / 64)
    hist = locality_rings(row, 3 * 8 + 3, 4, 8, 8)
    sums, _ = oracles.binning_rings(row, 27, 4, 8, 8)
    _close(hist.ring_sums, sums, 1e-12, "ring sums")


@check
def accuracy_planted(opts):
    rng = seeded_rng(16)
    perm = rng.permutation(64)
    ident = rng.standard_normal((64, 32))
    ident /= np.linalg.norm(ident, axis=1, keepdims=True)
    gt_mask = ForegroundMask.from_grid(rng.random((8, 8)) < 0.5)
    ext = {}
    for step, sigma in ((1, 1.0), (2, 0.3), (3, 0.01)):
        frame = ident[perm] + sigma * rng.standard_normal((64, 32))
        ext[step] = (match_points([frame], [ident]), gt_mask)
    rows = accuracy_curve(ext, perm, gt_mask, 10)
    assert min(r[1] for r in rows) == 0.0, f"no step reached MSE 0: {rows}"


@check
def cache_round_trip_frame_pass(opts):
    cfg, model, layout = _toy()
    frm = embed_prompt("a quiet gym | a tall man | drinking water", cfg)
    sc = SamplerConfig(n_steps=6, extract_step=2, apply_until_step=4, keep_background=True)
    _, cache = run_identity_pass(model, layout, 21, sc)
    match, mask = run_probe_pass(model, frm, 21, sc, cache)
    before = run_frame_pass(model, frm, 21, sc, cache, match, mask)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "cache.cctf"
        dump_tensors(path, cache_to_tensors(cache))
        loaded = cache_from_tensors(load_tensors(path))
    after = run_frame_pass(model, frm, 21, sc, loaded, match, mask)
    assert len(loaded.entries) == 4 * cfg.n_single
    assert np.array_equal(before, after), "frame pass changed after cache round trip"


def run_all(opts=None, out=print):
    """Run every check; returns the list of failed check names."""
    opts = opts or {}
    failures = []
    t0 = time.perf_counter()
    for fn in CHECKS:
        try:
            fn(opts)
        except AssertionError as exc:
            failures.append(fn.__name__)
            out(f"FAIL {fn.__name__}: {exc}")
        else:
            out(f"PASS {fn.__name__}")
    out(f"{len(CHECKS) - len(failures)}/{len(CHECKS)} checks passed "
        f"in {time.perf_counter() - t0:.1f}s")
    return failures
