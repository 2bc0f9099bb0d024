"""Slow, loop-based reference implementations.

Each function here recomputes something the fast path computes, written
independently with explicit Python loops and float64 math. They are used
by the test suite and by ``consistgen selfcheck``.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matmul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_without_columns(row, drop):
    """Plain softmax of ``row`` after deleting the columns in ``drop``; zeros there."""
    row = np.asarray(row, dtype=np.float64)
    keep = [j for j in range(len(row)) if j not in set(drop)]
    out = np.zeros(len(row))
    if not keep:
        return out
    m = max(row[j] for j in keep)
    exps = {j: math.exp(row[j] - m) for j in keep}
    z = sum(exps.values())
    for j in keep:
        out[j] = exps[j] / z
    return out


def linear_scan_argmax(row):
    best, best_i = row[0], 0
    for i, x in enumerate(row):
        if x > best:
            best, best_i = x, i
    return best_i, best


def rope_pair_rotate(vec, row, col, head_dim, base=10000.0):
    """Rotate one head vector pair by pair with explicit trig."""
    vec = np.asarray(vec, dtype=np.float64)
    n_axis = head_dim // 4
    out = vec.copy()
    for p in range(head_dim // 2):
        if p < n_axis:
            theta = row * base ** (-p / n_axis)
        else:
            theta = col * base ** (-(p - n_axis) / n_axis)
        x0, x1 = vec[2 * p], vec[2 * p + 1]
        out[2 * p] = x0 * math.cos(theta) - x1 * math.sin(theta)
        out[2 * p + 1] = x0 * math.sin(theta) + x1 * math.cos(theta)
    return out


def loop_attention(q, k, v, n_heads, mask=None):
    """Masked multi-head attention with every sum written out."""
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    L, width = q.shape
    M = k.shape[0]
    d = width // n_heads
    out = np.zeros((L, width))
    for hd in range(n_heads):
        for i in range(L):
            visible = [j for j in range(M) if mask is None or mask[i, j] == 0]
            if not visible:
                continue
            scores = {}
            for j in visible:
                s = 0.0
                for c in range(hd * d, (hd + 1) * d):
                    s += q[i, c] * k[j, c]
                scores[j] = s / math.sqrt(d)
            m = max(scores.values())
            z = sum(math.exp(s - m) for s in scores.values())
            for j in visible:
                p = math.exp(scores[j] - m) / z
                for c in range(hd * d, (hd + 1) * d):
                    out[i, c] += p * v[j, c]
    return out


def brute_force_match(frame_layers, identity_layers):
    """Nearest-cosine identity token for each frame token, averaged over layers."""
    n = frame_layers[0].shape[0]
    m = identity_layers[0].shape[0]
    idx, best = [], []
    for j in range(n):
        scores = []
        for k in range(m):
            s = 0.0
            for f, g in zip(frame_layers, identity_layers):
                a = np.asarray(f[j], dtype=np.float64)
                b = np.asarray(g[k], dtype=np.float64)
                s += float(a @ b) / (math.sqrt(a @ a) * math.sqrt(b @ b) + 1e-8)
            scores.append(s / len(frame_layers))
        i, v = linear_scan_argmax(scores)
        idx.append(i)
        best.append(v)
    return np.array(idx), np.array(best)


def loop_matching_error(pred, gt, w):
    total = 0.0
    for p, g in zip(pred, gt):
        total += (p // w - g // w) ** 2 + (p % w - g % w) ** 2
    return total / len(pred)


def loop_mask(layers, l_bg, l_fg):
    """Mask rule with materialized softmax; layers are (heads, hw, >=l_bg+l_fg) arrays."""
    n_txt = l_bg + l_fg
    first = np.asarray(layers[0])
    hw = first.shape[-2]
    bg = [0.0] * hw
    fg = [0.0] * hw
    count = 0
    for logits in layers:
        logits = np.asarray(logits, dtype=np.float64).reshape(-1, hw, logits.shape[-1])
        for head in logits:
            count += 1
            for i in range(hw):
                row = [head[i, j] for j in range(n_txt)]
                m = max(row)
                e = [math.exp(x - m) for x in row]
                z = sum(e)
                p = [x / z for x in e]
                bg[i] += sum(p[:l_bg]) / l_bg
                fg[i] += sum(p[l_bg:]) / l_fg
    return np.array([1 if fg[i] / count > bg[i] / count else 0 for i in range(hw)], dtype=np.uint8)


def brute_erode(grid, k):
    h, w = grid.shape
    r = k // 2
    out = np.zeros_like(grid)
    for i in range(h):
        for j in range(w):
            ok = True
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, x = i + di, j + dj
                    if not (0 <= y < h and 0 <= x < w) or not grid[y, x]:
                        ok = False
            out[i, j] = ok
    return out


def brute_dilate(grid, k):
    h, w = grid.shape
    r = k // 2
    out = np.zeros_like(grid)
    for i in range(h):
        for j in range(w):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, x = i + di, j + dj
                    if 0 <= y < h and 0 <= x < w and grid[y, x]:
                        out[i, j] = 1
    return out


def brute_refine(grid):
    return brute_dilate(brute_erode(np.asarray(grid, dtype=np.uint8), 3), 5)


def loop_gather(frame_bits, map_star):
    fg_frm, fg_id = [], []
    for j, bit in enumerate(frame_bits):
        if bit:
            fg_frm.append(j)
            fg_id.append(int(map_star[j]))
    return fg_frm, fg_id


def binning_rings(row, query_index, n_rings, h, w):
    """Per-token ring assignment by direct comparison against every edge."""
    r0, c0 = divmod(query_index, w)
    R = 0.0
    for r in (0, h - 1):
        for c in (0, w - 1):
            R = max(R, math.hypot(r - r0, c - c0))
    edges = [R * math.sqrt(k / n_rings) for k in range(n_rings + 1)]
    sums = [0.0] * n_rings
    counts = [0] * n_rings
    for t in range(h * w):
        r, c = divmod(t, w)
        dist = math.hypot(r - r0, c - c0)
        ring = n_rings - 1
        for k in range(n_rings):
            if edges[k] <= dist < edges[k + 1]:
                ring = k
                break
        sums[ring] += float(row[t])
        counts[ring] += 1
    return np.array(sums), counts
