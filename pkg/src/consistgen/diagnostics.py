"""Locality-bias rings, accuracy-vs-step tables, and the CCTF tensor container.

CCTF layout (all integers little-endian)::

    b"CCTF"  u16 version  u32 entry_count
    per entry: u16 name_len, name (utf-8), u8 dtype, u8 ndim, u32 dims[ndim], u64 offset
    payload: raw little-endian arrays at their absolute offsets

dtype codes: 1 = float32, 2 = uint8 (mask grids), 3 = int32 (index lists).
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correspondence import MatchResult, matching_error
from .errors import ConfigError, FormatError, InputError
from .masks import ForegroundMask, mask_iou
from .numerics import grid_coords, masked_softmax_rows, rope2d_apply

MAGIC = b"CCTF"
VERSION = 1
MAX_NAME = 64

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("int32"): 3}


@dataclass(frozen=True)
class RingHistogram:
    query_coord: tuple
    ring_sums: np.ndarray
    ring_radii: np.ndarray


def ring_radii(h: int, w: int, query_index: int, n_rings: int) -> np.ndarray:
    """Equal-area (continuum) ring edges r_k = R * sqrt(k / K)."""
    r0, c0 = divmod(query_index, w)
    R = max(math.hypot(r - r0, c - c0) for r in (0, h - 1) for c in (0, w - 1))
    return np.array([R * math.sqrt(k / n_rings) for k in range(n_rings + 1)])


def locality_rings(attn_weights, query_index: int, n_rings: int, h: int, w: int) -> RingHistogram:
    """Sum one query's attention over concentric equal-area rings around it.

    ``attn_weights`` is the (hw, hw) image-to-image slice or just the query's
    row. Rings are half-open [r_k, r_k+1) except the last, which is closed.
    """
    if n_rings < 1:
        raise InputError(f"n_rings must be >= 1, got {n_rings}")
    if not 0 <= query_index < h * w:
        raise InputError(f"query index {query_index} outside the {h}x{w} grid")
    a = np.asarray(attn_weights, dtype=np.float64)
    row = a[query_index] if a.ndim == 2 else a
    if row.shape != (h * w,):
        raise InputError(f"attention row has shape {row.shape}, expected ({h * w},)")
    radii = ring_radii(h, w, query_index, n_rings)
    coords = grid_coords(h, w)
    q = np.array(divmod(query_index, w))
    dist = np.hypot(*(coords - q).T)
    ring = np.clip(np.searchsorted(radii, dist, side="right") - 1, 0, n_rings - 1)
    sums = np.bincount(ring, weights=row, minlength=n_rings)
    return RingHistogram(tuple(int(x) for x in q), sums, radii)


def inter_image_attention(frame_bundles, identity_k_no_pos, rope, h: int, w: int) -> np.ndarray:
    """Frame image queries attending over cat[frame sequence, identity image keys].

    Returns the (hw, hw) block on identity keys, averaged over heads and
    layers. Identity keys are placed at their own grid positions, i.e. the
    plain inter-image attention whose locality bias the rings expose.
    """
    coords = grid_coords(h, w)
    total = None
    count = 0
    for bundle, k0 in zip(frame_bundles, identity_k_no_pos):
        k_id = rope2d_apply(k0, coords, rope)
        d = bundle.head_dim
        q_img = bundle.image_rows("q")
        keys = np.concatenate([bundle.k_with_pos, k_id])
        for i in range(bundle.n_heads):
            sl = slice(i * d, (i + 1) * d)
            p = masked_softmax_rows(q_img[:, sl] @ keys[:, sl].T / np.float32(math.sqrt(d)))
            block = p[:, -h * w:].astype(np.float64)
            total = block if total is None else total + block
            count += 1
    if count == 0:
        raise InputError("no bundles given")
    return total / count


def accuracy_curve(extractions: dict, gt_map, gt_mask: ForegroundMask, n_steps: int):
    """(step, mse, iou) rows for per-step (MatchResult, ForegroundMask) extractions."""
    rows = []
    for step in sorted(extractions):
        if not 1 <= step <= n_steps:
            raise ConfigError(f"step {step} outside [1, {n_steps}]")
        match, mask = extractions[step]
        rows.append((step, matching_error(match, gt_map, gt_mask.h, gt_mask.w),
                     mask_iou(mask, gt_mask)))
    return rows


def format_accuracy_table(rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["step", "mse", "iou"])
    for step, mse, iou in rows:
        out.writerow([step, repr(float(mse)), repr(float(iou))])
    return buf.getvalue()


def format_ring_table(hist: RingHistogram) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["ring", "sum"])
    for k, s in enumerate(hist.ring_sums):
        out.writerow([k, repr(float(s))])
    return buf.getvalue()


# ---- CCTF -----------------------------------------------------------------

def _as_storable(value) -> np.ndarray:
    if isinstance(value, ForegroundMask):
        return value.grid.astype(np.uint8)
    arr = np.asarray(value)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif np.issubdtype(arr.dtype, np.integer) and arr.dtype != np.uint8:
        if arr.size and (arr.min() < -2**31 or arr.max() >= 2**31):
            raise InputError("integer tensor does not fit int32")
        arr = arr.astype(np.int32)
    elif arr.dtype != np.uint8:
        arr = arr.astype(np.float32)
    return arr


def dump_tensors(path, tensors: dict) -> None:
    """Write named arrays / masks to ``path`` in CCTF format."""
    items = []
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if not raw or len(raw) > MAX_NAME:
            raise InputError(f"tensor name must be 1..{MAX_NAME} bytes: {name!r}")
        arr = _as_storable(value)
        if arr.ndim > 255:
            raise InputError(f"too many dimensions for {name!r}")
        items.append((raw, arr))

    header = 4 + 2 + 4 + sum(2 + len(n) + 1 + 1 + 4 * a.ndim + 8 for n, a in items)
    table, payload = [], []
    offset = header
    for raw, arr in items:
        code = _CODES[arr.dtype]
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append(struct.pack("<H", len(raw)) + raw
                     + struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape)
                     + struct.pack("<Q", offset))
        payload.append(data)
        offset += len(data)
    blob = MAGIC + struct.pack("<HI", VERSION, len(items)) + b"".join(table) + b"".join(payload)
    Path(path).write_bytes(blob)


def load_tensors(path) -> dict:
    """Read a CCTF file; raises :class:`FormatError` naming the defect."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("magic", f"{path}: not a CCTF file (magic {blob[:4]!r})")
    if len(blob) < 10:
        raise FormatError("truncated", f"{path}: header cut short")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise FormatError("version", f"{path}: unsupported version {version}")
    pos = 10
    entries = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            if n > MAX_NAME:
                raise FormatError("name", f"{path}: entry name of {n} bytes")
            name = blob[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code, ndim = struct.unpack_from("<BB", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 2)
            (offset,) = struct.unpack_from("<Q", blob, pos + 2 + 4 * ndim)
            pos += 2 + 4 * ndim + 8
            if code not in _DTYPES:
                raise FormatError("dtype", f"{path}: unknown dtype code {code} for {name!r}")
            entries.append((name, _DTYPES[code], shape, offset))
    except struct.error:
        raise FormatError("truncated", f"{path}: entry table cut short") from None

    out = {}
    spans = []
    for name, dt, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset < pos or offset + nbytes > len(blob):
            raise FormatError("truncated", f"{path}: payload of {name!r} out of file bounds")
        if name in out:
            raise FormatError("name", f"{path}: duplicate entry {name!r}")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
        out[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError("overlap", f"{path}: payloads of {n0!r} and {n1!r} overlap")
    return out


def cache_to_tensors(cache) -> dict:
    meta = [cache.h, cache.w, cache.n_single, cache.width, cache.extract_step,
            cache.apply_until_step]
    out = {"meta/cache": np.array(meta, dtype=np.int32), "identity_mask": cache.mask}
    for n, feat in enumerate(cache.match_features):
        out[f"match/l{n}"] = feat
    for (step, layer), e in sorted(cache.entries.items()):
        p = f"s{step}/l{layer}/"
        out[p + "k0"] = e.k_no_pos
        out[p + "v"] = e.v
        out[p + "h"] = e.attn_out
    return out


def cache_from_tensors(tensors: dict):
    from .sampler import CacheEntry, IdentityCache

    try:
        h, w, n_single, width, extract_step, apply_until = (int(x) for x in tensors["meta/cache"])
        cache = IdentityCache(h, w, n_single, width, extract_step, apply_until)
        cache.mask = ForegroundMask.from_grid(tensors["identity_mask"])
        cache.match_features = [tensors[f"match/l{n}"] for n in range(n_single)]
        for step in range(1, apply_until + 1):
            for layer in range(n_single):
                p = f"s{step}/l{layer}/"
                cache.entries[(step, layer)] = CacheEntry(tensors[p + "k0"], tensors[p + "v"],
                                                          tensors[p + "h"])
    except KeyError as exc:
        raise FormatError("content", f"cache dump lacks entry {exc.args[0]!r}") from None
    return cache


def match_to_tensors(match: MatchResult) -> dict:
    return {"map_star": np.asarray(match.map_star), "s_max": np.asarray(match.s_max)}


def match_from_tensors(tensors: dict) -> MatchResult:
    return MatchResult(tensors["map_star"].astype(np.int64), tensors["s_max"].astype(np.float64))
