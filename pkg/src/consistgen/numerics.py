"""Dense float32 primitives and the axial 2D rotary embedding.

Everything here is a pure function of its inputs. Arrays are float32
row-major; values returned from every public function are finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

# Stand-in for -inf in additive logit masks.
NEG_INF = np.float32(-1e9)

# Added to the norm product in cosine similarity.
COS_EPS = 1e-8


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a, b) -> np.ndarray:
    """Plain float32 matrix product with an explicit shape check."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InputError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InputError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def masked_softmax_rows(logits, additive_mask=None) -> np.ndarray:
    """Row softmax with an additive {0, NEG_INF} mask.

    Masked entries get exactly zero probability and a row with every entry
    masked comes back as all zeros instead of NaN.
    """
    logits = as_tensor(logits)
    if np.isnan(logits).any():
        raise InputError("NaN in attention logits")
    if additive_mask is None:
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    mask = as_tensor(additive_mask)
    if mask.shape != logits.shape:
        raise InputError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    visible = mask > NEG_INF / 2
    z = np.where(visible, logits + mask, -np.inf)
    row_max = z.max(axis=-1, keepdims=True)
    dead = ~visible.any(axis=-1, keepdims=True)
    row_max = np.where(dead, np.float32(0.0), row_max)
    e = np.where(visible, np.exp(z - row_max), np.float32(0.0))
    denom = e.sum(axis=-1, keepdims=True)
    return np.where(dead, np.float32(0.0), e / np.where(dead, np.float32(1.0), denom))


def cosine_similarity_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarity; zero rows score 0 against everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or a.shape[1] < 1:
        raise InputError(f"incompatible shapes for cosine similarity: {a.shape}, {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return (a @ b.T) / (np.outer(na, nb) + COS_EPS)


def argmax_rows(a):
    """Per-row (first maximizing index, maximum value)."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[1] < 1:
        raise InputError(f"argmax_rows needs an n x m array with m >= 1, got {a.shape}")
    idx = np.argmax(a, axis=1)  # numpy returns the first occurrence
    return idx.astype(np.int64), a[np.arange(a.shape[0]), idx]


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base_frequency: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 4 != 0:
            raise ConfigError(
                f"head_dim must be a positive multiple of 4 (row/col halves of "
                f"rotation pairs), got {self.head_dim}"
            )
        if not self.base_frequency > 0:
            raise ConfigError(f"base_frequency must be positive, got {self.base_frequency}")

    @property
    def pairs_per_axis(self) -> int:
        return self.head_dim // 4

    def frequencies(self) -> np.ndarray:
        n = self.pairs_per_axis
        return self.base_frequency ** (-np.arange(n, dtype=np.float64) / n)


def rope_angles(coords, cfg: RopeConfig) -> np.ndarray:
    """Rotation angle of every channel pair, shape (n, head_dim // 2).

    The first half of the pairs turns with the row index, the second half
    with the column index.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    freqs = cfg.frequencies()
    return np.concatenate(
        [coords[:, :1] * freqs[None, :], coords[:, 1:] * freqs[None, :]], axis=1
    )


def rope2d_apply(tokens, coords, cfg: RopeConfig, inverse: bool = False) -> np.ndarray:
    """Rotate adjacent channel pairs (2i, 2i+1) by their grid-position angle.

    ``tokens`` is (n, k * head_dim); every head-sized slice gets the same
    rotation. ``inverse`` rotates the other way, undoing a previous call.
    """
    tokens = as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[1] % cfg.head_dim != 0:
        raise InputError(f"token width {tokens.shape} is not a multiple of head_dim {cfg.head_dim}")
    coords = np.asarray(coords).reshape(-1, 2)
    if coords.shape[0] != tokens.shape[0]:
        raise InputError(f"{coords.shape[0]} coordinates for {tokens.shape[0]} tokens")
    n, width = tokens.shape
    ang = rope_angles(coords, cfg)
    if inverse:
        ang = -ang
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    x = tokens.astype(np.float64).reshape(n, width // cfg.head_dim, cfg.head_dim // 2, 2)
    x0, x1 = x[..., 0], x[..., 1]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-1)
    return out.reshape(n, width).astype(np.float32)


def grid_coords(h: int, w: int) -> np.ndarray:
    """Row-major (row, col) pairs of an h x w token grid."""
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.stack([rows, cols], axis=1)


def check_coords(coords, h: int, w: int) -> np.ndarray:
    coords = np.asarray(coords).reshape(-1, 2)
    bad = (coords[:, 0] < 0) | (coords[:, 0] >= h) | (coords[:, 1] < 0) | (coords[:, 1] >= w)
    if bad.any():
        raise InputError(f"grid coordinate {tuple(coords[bad][0])} outside {h}x{w}")
    return coords


def seeded_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) stream; reproducible across platforms."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))
