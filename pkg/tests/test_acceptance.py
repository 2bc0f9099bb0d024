"""The eight acceptance criteria, each checked at its stated tolerance and time budget.

Every criterion prints one ``PASS``/``FAIL`` line. Run with ``pytest -s`` to
see them inline, or directly with ``python tests/test_acceptance.py``.
"""

import contextlib
import io
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from consistgen import oracles
from consistgen.cli import main as cli_main
from consistgen.correspondence import MatchResult, match_points
from consistgen.diagnostics import (
    accuracy_curve,
    cache_from_tensors,
    cache_to_tensors,
    dump_tensors,
    load_tensors,
    locality_rings,
)
from consistgen.masks import ForegroundMask, extract_raw_mask, morph_refine
from consistgen.model import Hooks, ModelConfig, build_model, embed_prompt, forward, unified_attention
from consistgen.numerics import NEG_INF, RopeConfig, rope2d_apply, seeded_rng
from consistgen.sampler import (
    SamplerConfig,
    alpha_at,
    euler_sample,
    make_frame_hooks,
    probe_extract,
    run_frame_pass,
    run_identity_pass,
    run_probe_pass,
)
from consistgen.selfcheck import two_layer_disagreement
from consistgen.tracking import (
    ExtendedAttentionInputs,
    adaptive_merge,
    build_gather_plan,
    extend_attention,
    point_tracking_attention,
    reencode_identity_keys,
)

IDENTITY = "a quiet library | an old woman with a cane | reading"
FRAME = "a quiet library | an old woman with a cane | walking between shelves"


@contextlib.contextmanager
def criterion(number, title, budget_s):
    t0 = time.perf_counter()
    failure = None
    try:
        yield
    except AssertionError as exc:
        failure = exc
    elapsed = time.perf_counter() - t0
    if failure is None and elapsed >= budget_s:
        failure = AssertionError(f"took {elapsed:.2f}s, budget {budget_s}s")
    status = "PASS" if failure is None else "FAIL"
    detail = "" if failure is None else f": {failure}"
    sys.__stdout__.write(f"{status} criterion {number} {title} ({elapsed:.2f}s < {budget_s}s){detail}\n")
    sys.__stdout__.flush()
    if failure is not None:
        raise failure


def test_1_oracle_equivalence():
    with criterion(1, "oracle equivalence", 10):
        r = seeded_rng(101)
        cfg = ModelConfig(l=6, h=4, w=4, d=8, n_heads=2)
        for _ in range(5):
            q, k, v = r.standard_normal((3, cfg.seq_len, cfg.width)).astype(np.float32)
            bundle = unified_attention(q, k, v, cfg.l, cfg)
            empty = ForegroundMask.full(4, 4, 0)
            plan = build_gather_plan(empty, empty, MatchResult.identity(16), False)
            ext = extend_attention(bundle, plan, empty, bundle.image_rows("k_no_pos"),
                                   bundle.image_rows("v"), cfg.rope, 4, 4)
            assert np.array_equal(point_tracking_attention(ext), bundle.attn_out), "empty block not bitwise"

            extra = 7
            mask = np.zeros((cfg.seq_len, cfg.seq_len + extra), dtype=np.float32)
            mask[:, cfg.seq_len:] = NEG_INF
            ext = ExtendedAttentionInputs(
                bundle.q,
                np.concatenate([bundle.k_with_pos, r.standard_normal((extra, cfg.width)).astype(np.float32) * 5]),
                np.concatenate([bundle.v, r.standard_normal((extra, cfg.width)).astype(np.float32)]),
                mask, cfg.n_heads)
            err = np.max(np.abs(point_tracking_attention(ext) - bundle.attn_out))
            assert err <= 1e-6, f"fully masked block differs by {err}"

        for _ in range(50):
            L, extra, heads, width = int(r.integers(3, 12)), int(r.integers(0, 10)), 2, 16
            q = r.standard_normal((L, width)).astype(np.float32)
            k = r.standard_normal((L + extra, width)).astype(np.float32)
            v = r.standard_normal((L + extra, width)).astype(np.float32)
            mask = np.where(r.random((L, L + extra)) < 0.5, NEG_INF, np.float32(0)).astype(np.float32)
            mask[:, :L] = 0
            got = point_tracking_attention(ExtendedAttentionInputs(q, k, v, mask, heads))
            err = np.max(np.abs(got - oracles.loop_attention(q, k, v, heads, mask)))
            assert err < 1e-5, f"loop oracle differs by {err}"


def test_2_rope_reencoding():
    with criterion(2, "RoPE re-encoding", 5):
        rope = RopeConfig(32)
        r = seeded_rng(202)
        k0 = r.standard_normal((64, 64)).astype(np.float32)
        coords = np.array([(i // 8, i % 8) for i in range(64)])
        err = np.max(np.abs(reencode_identity_keys(k0, coords, rope, 8, 8) - rope2d_apply(k0, coords, rope)))
        assert err <= 1e-6, f"round trip differs by {err}"
        for _ in range(200):
            q, k = r.standard_normal((2, 1, 32)).astype(np.float32)
            src = r.integers(0, 8, 2)
            target = (src + 4 + r.integers(0, 4, 2)) % 8        # far from the source cell
            p = r.integers(0, 8, 2)
            got = float(rope2d_apply(q, [p], rope)[0] @ reencode_identity_keys(k, [target], rope, 8, 8)[0])
            q_in_identity = src - (target - p)
            want = float(rope2d_apply(q, [q_in_identity], rope)[0] @ rope2d_apply(k, [src], rope)[0])
            assert abs(got - want) <= 1e-5, f"relative-position logit differs by {abs(got - want)}"
            # a colocated query now sees the key at zero offset
            at = float(rope2d_apply(q, [target], rope)[0] @ reencode_identity_keys(k, [target], rope, 8, 8)[0])
            assert abs(at - float(q[0] @ k[0])) <= 1e-5


def test_3_correspondence_recovery():
    with criterion(3, "correspondence recovery", 5):
        r = seeded_rng(303)
        for _ in range(5):
            perm = r.permutation(64)
            ident = []
            for _ in range(4):
                x = r.standard_normal((64, 64))
                ident.append(x / np.linalg.norm(x, axis=1, keepdims=True))
            frame = [x[perm] + 0.01 * r.standard_normal((64, 64)) for x in ident]
            res = match_points(frame, ident)
            ref, ref_val = oracles.brute_force_match(frame, ident)
            assert np.array_equal(res.map_star, perm), "planted permutation not recovered"
            assert np.array_equal(res.map_star, ref) and np.allclose(res.s_max, ref_val, atol=1e-9)
        frames, idents = two_layer_disagreement()
        assert match_points(frames[:1], idents[:1]).map_star[0] == 0
        assert match_points(frames[1:], idents[1:]).map_star[0] == 1
        assert match_points(frames, idents).map_star[0] == 1, "matches averaged instead of similarities"


def test_4_mask_extraction():
    with criterion(4, "mask extraction", 5):
        r = seeded_rng(404)
        for _ in range(20):
            layers = [r.standard_normal((2, 64, 20)) * 3 for _ in range(3)]
            got = extract_raw_mask(layers, 5, 6, 8, 8)
            assert np.array_equal(got.bits, oracles.loop_mask(layers, 5, 6)), "loop oracle mismatch"
            bumped = [x.copy() for x in layers]
            for x in bumped:
                x[..., 11] += r.uniform(-50, 50)
            assert np.array_equal(extract_raw_mask(bumped, 5, 6, 8, 8).bits, got.bits)
        for _ in range(50):
            grid = (r.random((8, 8)) < r.uniform(0.2, 0.9)).astype(np.uint8)
            refined = morph_refine(ForegroundMask.from_grid(grid), 8, 8)
            assert np.array_equal(refined.grid, oracles.brute_refine(grid)), "morphology mismatch"
        single = np.zeros((8, 8), dtype=np.uint8)
        single[4, 4] = 1
        assert not morph_refine(ForegroundMask.from_grid(single), 8, 8).bits.any()
        assert morph_refine(ForegroundMask.full(5, 5), 5, 5).bits.all()


def test_5_merge_algebra():
    with criterion(5, "merge algebra", 2):
        r = seeded_rng(505)
        frame = r.standard_normal((1000, 32)).astype(np.float32)
        ident = r.standard_normal((1000, 32)).astype(np.float32)
        s = r.random(1000)
        assert np.array_equal(adaptive_merge(frame, ident, s, 0.0), frame)
        err = np.max(np.abs(adaptive_merge(frame, ident, np.ones(1000), 1.0) - ident))
        assert err <= 1e-7, f"alpha*S = 1 differs from copy by {err}"
        lo, hi = np.minimum(frame, ident), np.maximum(frame, ident)
        prev = np.zeros(1000)
        for alpha in np.linspace(0, 1, 11):
            got = adaptive_merge(frame, ident, s, alpha)
            assert np.all(got >= lo - 1e-6) and np.all(got <= hi + 1e-6), "not convex"
            dist = np.linalg.norm(got - frame, axis=1)
            assert np.all(dist >= prev - 1e-5), "influence not monotone in alpha"
            prev = dist


def test_6_pipeline_constants_and_ablations():
    with criterion(6, "pipeline constants and ablation semantics", 60):
        sc = SamplerConfig()
        assert (sc.n_steps, sc.extract_step, sc.apply_until_step) == (50, 11, 40)
        cfg = ModelConfig()
        model = build_model(cfg)
        identity = embed_prompt(IDENTITY, cfg)
        frame = embed_prompt(FRAME, cfg)

        steps = []
        plain, _ = euler_sample(model, identity, 1, sc,
                                lambda t: Hooks(observers=[lambda s, n, b: n == 0 and steps.append(s)]))
        assert steps == list(range(1, 51)), "default run is not 50 Euler steps"
        latent, cache = run_identity_pass(model, identity, 1, sc)
        assert np.array_equal(latent, plain), "identity observation perturbed sampling"
        assert sorted({s for s, _ in cache.entries}) == list(range(1, 41))

        probed = []
        match, mask = run_probe_pass(model, frame, 1, sc, cache,
                                     observers=[lambda s, n, b: n == 0 and probed.append(s)])
        assert probed == list(range(1, 12)), "extraction is not at step 11"

        hooks = make_frame_hooks(model, sc, cache, match, mask)
        bundles = {}
        x = np.zeros((cfg.hw, cfg.latent_channels), dtype=np.float32)
        for t in (40, 41):
            forward(model, x, frame, 0.5, Hooks(observers=[lambda s, n, b: bundles.setdefault(s, b)]), step=t)
        assert hooks.replace(40, 0, bundles[40]) is not None, "mechanism inactive at step 40"
        assert hooks.replace(41, 0, bundles[41]) is None, "mechanism active after step 40"
        assert alpha_at(39, sc.schedule) > 0 and alpha_at(40, sc.schedule) == 0

        off = SamplerConfig(pta_enabled=False, merge_enabled=False, masking_enabled=False)
        got = run_frame_pass(model, frame, 1, off, cache, match, mask)
        assert np.array_equal(got, euler_sample(model, frame, 1, off)[0]), "toggles off is not plain sampling"


def test_7_diagnostics():
    with criterion(7, "diagnostics", 10):
        r = seeded_rng(707)
        for _ in range(200):
            row = r.random(64)
            row /= row.sum()
            query, k = int(r.integers(0, 64)), int(r.integers(1, 9))
            hist = locality_rings(row, query, k, 8, 8)
            assert abs(hist.ring_sums.sum() - row.sum()) <= 1e-6, "ring mass not conserved"
            assert np.allclose(hist.ring_sums, oracles.binning_rings(row, query, k, 8, 8)[0], atol=1e-12)
        uniform = np.full(64, 1 / 64)
        assert np.array_equal(locality_rings(uniform, 36, 4, 8, 8).ring_sums,
                              oracles.binning_rings(uniform, 36, 4, 8, 8)[0])

        cfg = ModelConfig()
        model = build_model(cfg)
        identity = embed_prompt(IDENTITY, cfg)
        sc = SamplerConfig()
        _, cache = run_identity_pass(model, identity, 1, sc)
        ext = probe_extract(model, identity, 1, sc, cache, [5, 11, 20])
        rows = {s: (mse, iou) for s, mse, iou in accuracy_curve(ext, np.arange(cfg.hw), cache.mask, sc.n_steps)}
        assert rows[11] == (0.0, 1.0), f"self-match at extraction step gave {rows[11]}"


def _run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli_main(argv, stdout=out, stderr=err)
    assert code == 0, f"{argv[0]} exited {code}: {err.getvalue()}"
    return out.getvalue()


def test_8_determinism_and_serialization():
    with criterion(8, "determinism and serialization", 60):
        with tempfile.TemporaryDirectory() as tmp:
            outputs = []
            d = str(Path(tmp) / "run")
            for _ in range(2):
                text = _run_cli(["identity", "--out", d])
                for i in (0, 1):
                    text += _run_cli(["frame", "--out", d, "--frame-index", str(i)])
                text += _run_cli(["diagnose", "rings", "--out", d, "--frame-index", "1"])
                text += _run_cli(["diagnose", "accuracy", "--out", d, "--frame-index", "0"])
                files = {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())}
                outputs.append((text, files))
            assert outputs[0][0] == outputs[1][0], "stdout differs between runs"
            assert outputs[0][1] == outputs[1][1], "output files differ between runs"

            cfg = ModelConfig()
            model = build_model(cfg)
            identity, frame = embed_prompt(IDENTITY, cfg), embed_prompt(FRAME, cfg)
            sc = SamplerConfig()
            _, cache = run_identity_pass(model, identity, 1, sc)
            match, mask = run_probe_pass(model, frame, 1, sc, cache)
            before = run_frame_pass(model, frame, 1, sc, cache, match, mask)
            path = Path(tmp) / "cache.cctf"
            dump_tensors(path, cache_to_tensors(cache))
            loaded = cache_from_tensors(load_tensors(path))
            after = run_frame_pass(model, frame, 1, sc, loaded, match, mask)
            assert np.array_equal(before, after), "frame pass changed after cache round trip"


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
