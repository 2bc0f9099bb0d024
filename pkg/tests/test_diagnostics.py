import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consistgen import oracles
from consistgen.correspondence import MatchResult, match_points
from consistgen.diagnostics import (
    accuracy_curve,
    cache_from_tensors,
    cache_to_tensors,
    dump_tensors,
    format_accuracy_table,
    format_ring_table,
    load_tensors,
    locality_rings,
    match_from_tensors,
    match_to_tensors,
    ring_radii,
)
from consistgen.errors import ConfigError, FormatError, InputError
from consistgen.masks import ForegroundMask
from consistgen.model import embed_prompt
from consistgen.sampler import SamplerConfig, run_frame_pass, run_identity_pass, run_probe_pass


def test_delta_row_lands_in_first_ring():
    row = np.zeros(64)
    row[27] = 0.7
    hist = locality_rings(row, 27, 4, 8, 8)
    assert hist.ring_sums[0] == pytest.approx(0.7)
    assert np.all(hist.ring_sums[1:] == 0)
    assert hist.query_coord == (3, 3)


def test_radii_shape_and_edge():
    r = ring_radii(8, 8, 0, 4)
    assert len(r) == 5 and r[0] == 0
    assert r[-1] == pytest.approx(np.hypot(7, 7))
    assert np.all(np.diff(r) > 0)


@pytest.mark.parametrize("query", [0, 27, 36, 63])
def test_uniform_matches_binning_oracle(query):
    row = np.full(64, 1 / 64)
    sums, counts = oracles.binning_rings(row, query, 4, 8, 8)
    hist = locality_rings(row, query, 4, 8, 8)
    assert np.array_equal(hist.ring_sums, sums)
    assert sum(counts) == 64


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(0, 63))
def test_rings_conserve_mass_and_match_oracle(seed, k, query):
    row = np.random.default_rng(seed).random(64)
    hist = locality_rings(row, query, k, 8, 8)
    assert abs(hist.ring_sums.sum() - row.sum()) <= 1e-6
    assert np.all(hist.ring_sums >= 0)
    assert np.allclose(hist.ring_sums, oracles.binning_rings(row, query, k, 8, 8)[0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 63))
def test_ring_refinement_merges_back(seed, k, query):
    row = np.random.default_rng(seed).random(64)
    coarse = locality_rings(row, query, k, 8, 8).ring_sums
    fine = locality_rings(row, query, 2 * k, 8, 8).ring_sums
    assert np.allclose(fine.reshape(k, 2).sum(axis=1), coarse, atol=1e-9)


def test_rings_accept_full_matrix():
    attn = np.eye(64)
    assert locality_rings(attn, 10, 3, 8, 8).ring_sums[0] == 1


@pytest.mark.parametrize("args", [(-1, 4), (64, 4), (5, 0)])
def test_rings_reject_bad_arguments(args):
    with pytest.raises(InputError):
        locality_rings(np.ones(64), args[0], args[1], 8, 8)


def test_ring_table_format():
    hist = locality_rings(np.eye(64)[0], 0, 2, 8, 8)
    assert format_ring_table(hist).splitlines() == ["ring,sum", "0,1.0", "1,0.0"]


def test_accuracy_self_extraction():
    mask = ForegroundMask.from_grid(np.eye(8, dtype=np.uint8))
    ext = {s: (MatchResult.identity(64), mask) for s in (1, 5, 9)}
    rows = accuracy_curve(ext, np.arange(64), mask, 10)
    assert [r[0] for r in rows] == [1, 5, 9]
    assert all(mse == 0 and iou == 1 for _, mse, iou in rows)
    assert format_accuracy_table(rows).splitlines()[:2] == ["step,mse,iou", "1,0.0,1.0"]


def test_accuracy_planted_reaches_zero(rng):
    perm = rng.permutation(64)
    ident = rng.standard_normal((64, 32))
    ident /= np.linalg.norm(ident, axis=1, keepdims=True)
    mask = ForegroundMask.full(8, 8)
    ext = {}
    for step, sigma in ((1, 2.0), (2, 0.5), (3, 0.01)):
        frame = ident[perm] + sigma * rng.standard_normal((64, 32))
        ext[step] = (match_points([frame], [ident]), mask)
    rows = accuracy_curve(ext, perm, mask, 10)
    assert len(rows) == 3
    assert min(r[1] for r in rows) == 0


def test_accuracy_rejects_out_of_range_step():
    mask = ForegroundMask.full(8, 8)
    with pytest.raises(ConfigError):
        accuracy_curve({11: (MatchResult.identity(64), mask)}, np.arange(64), mask, 10)


def test_cctf_round_trip(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "scalarish": np.array([1.5], dtype=np.float32),
        "mask": ForegroundMask.from_grid(rng.random((4, 5)) < 0.5),
        "idx": rng.integers(0, 100, 7),
        "empty": np.zeros((0, 3), dtype=np.float32),
    }
    path = tmp_path / "t.cctf"
    dump_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    assert np.array_equal(back["a"], tensors["a"]) and back["a"].dtype == np.float32
    assert np.array_equal(back["mask"], tensors["mask"].grid) and back["mask"].dtype == np.uint8
    assert np.array_equal(back["idx"], tensors["idx"]) and back["idx"].dtype == np.int32
    assert back["empty"].shape == (0, 3)
    dump_tensors(tmp_path / "u.cctf", back)
    assert (tmp_path / "u.cctf").read_bytes() == path.read_bytes()


def test_cctf_header_bytes(tmp_path):
    path = tmp_path / "t.cctf"
    dump_tensors(path, {"x": np.array([1.0], dtype=np.float32)})
    blob = path.read_bytes()
    assert blob[:4] == b"CCTF"
    assert struct.unpack_from("<HI", blob, 4) == (1, 1)
    assert blob[-4:] == struct.pack("<f", 1.0)


def _defect(tmp_path, blob):
    path = tmp_path / "bad.cctf"
    path.write_bytes(blob)
    with pytest.raises(FormatError) as info:
        load_tensors(path)
    return info.value.defect


def test_cctf_defects(tmp_path):
    path = tmp_path / "t.cctf"
    dump_tensors(path, {"x": np.arange(6, dtype=np.float32), "y": np.ones(2, dtype=np.float32)})
    good = path.read_bytes()
    assert _defect(tmp_path, b"XCTF" + good[4:]) == "magic"
    assert _defect(tmp_path, good[:4] + struct.pack("<H", 2) + good[6:]) == "version"
    assert _defect(tmp_path, good[:-3]) == "truncated"
    assert _defect(tmp_path, good[:12]) == "truncated"
    # each table entry is 17 bytes (1-byte name, 1-d); y's offset field starts at byte 36
    x_offset = struct.unpack_from("<Q", good, 10 + 9)[0]
    tampered = bytearray(good)
    struct.pack_into("<Q", tampered, 36, x_offset + 4)
    assert _defect(tmp_path, bytes(tampered)) == "overlap"
    bad_dtype = bytearray(good)
    bad_dtype[10 + 2 + 1] = 9
    assert _defect(tmp_path, bytes(bad_dtype)) == "dtype"


def test_cctf_rejects_long_names(tmp_path):
    with pytest.raises(InputError):
        dump_tensors(tmp_path / "t.cctf", {"n" * 65: np.ones(1)})


def test_match_round_trip(tmp_path, rng):
    match = MatchResult(rng.permutation(64), rng.random(64))
    dump_tensors(tmp_path / "m.cctf", match_to_tensors(match))
    back = match_from_tensors(load_tensors(tmp_path / "m.cctf"))
    assert np.array_equal(back.map_star, match.map_star)
    assert np.allclose(back.s_max, match.s_max, atol=1e-7)


def test_cache_missing_entry_is_content_error(tmp_path, short_identity):
    dump_tensors(tmp_path / "c.cctf", cache_to_tensors(short_identity[1]))
    tensors = load_tensors(tmp_path / "c.cctf")
    del tensors["s2/l1/v"]
    with pytest.raises(FormatError) as info:
        cache_from_tensors(tensors)
    assert info.value.defect == "content"


def test_cache_round_trip_gives_bitwise_frame_pass(tmp_path, model, layout, cfg):
    frame = embed_prompt("a quiet library | an old woman with a cane | sitting by the window", cfg)
    sc = SamplerConfig(n_steps=6, extract_step=2, apply_until_step=4, keep_background=True)
    _, cache = run_identity_pass(model, layout, 1, sc)
    match, mask = run_probe_pass(model, frame, 1, sc, cache)
    before = run_frame_pass(model, frame, 1, sc, cache, match, mask)
    dump_tensors(tmp_path / "cache.cctf", cache_to_tensors(cache))
    loaded = cache_from_tensors(load_tensors(tmp_path / "cache.cctf"))
    assert len(loaded.entries) == 4 * cfg.n_single
    assert np.array_equal(loaded.mask.bits, cache.mask.bits)
    assert np.array_equal(run_frame_pass(model, frame, 1, sc, loaded, match, mask), before)
