"""A miniature multimodal diffusion transformer.

Text and image tokens are concatenated and go through global attention in
every block. ``n_double`` blocks with separate text/image projections run
first, then ``n_single`` blocks that share one projection set. Only the
single blocks expose hooks.

The weights are random (seeded) and untrained; the model exists so the
consistency machinery has real activations to read and rewrite.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, HookError, InputError, PromptFormatError
from .numerics import (
    RopeConfig,
    as_tensor,
    grid_coords,
    masked_softmax_rows,
    matmul,
    rope2d_apply,
    seeded_rng,
)


@dataclass(frozen=True)
class ModelConfig:
    l: int = 16
    h: int = 8
    w: int = 8
    d: int = 32
    n_heads: int = 2
    n_double: int = 2
    n_single: int = 4
    weight_seed: int = 0
    latent_channels: int = 16
    vocab_size: int = 4096
    mlp_ratio: int = 2
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("l", "h", "w", "d", "n_heads", "n_single", "latent_channels",
                     "vocab_size", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_double < 0:
            raise ConfigError(f"n_double must be non-negative, got {self.n_double}")
        self.rope  # validates d

    @property
    def hw(self) -> int:
        return self.h * self.w

    @property
    def width(self) -> int:
        return self.n_heads * self.d

    @property
    def seq_len(self) -> int:
        return self.l + self.hw

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.d, self.rope_base)


@dataclass(frozen=True)
class PromptLayout:
    l_bg: int
    l_fg: int
    token_ids: tuple

    def __post_init__(self):
        if self.l_bg + self.l_fg > len(self.token_ids):
            raise PromptFormatError("l_bg + l_fg exceeds the text length")


@dataclass
class ActivationBundle:
    """Single-block attention activations for one forward call.

    Rows are ``text_len`` text tokens followed by the image grid in
    row-major order; columns are heads concatenated.
    """

    layer_index: int
    step: Optional[int]
    q: np.ndarray
    k_with_pos: np.ndarray
    k_no_pos: np.ndarray
    v: np.ndarray
    attn_out: np.ndarray
    text_len: int
    n_heads: int

    @property
    def head_dim(self) -> int:
        return self.q.shape[1] // self.n_heads

    def image_rows(self, name: str) -> np.ndarray:
        return getattr(self, name)[self.text_len:]

    def logits(self) -> np.ndarray:
        """Pre-softmax attention scores, shape (n_heads, L, L)."""
        d = self.head_dim
        return np.stack([
            matmul(self.q[:, i * d:(i + 1) * d], self.k_with_pos[:, i * d:(i + 1) * d].T)
            / np.float32(math.sqrt(d))
            for i in range(self.n_heads)
        ])


Observer = Callable[[Optional[int], int, ActivationBundle], None]
Replacer = Callable[[Optional[int], int, ActivationBundle], Optional[np.ndarray]]


@dataclass
class Hooks:
    """Per-call hooks for the single blocks.

    Observers see every single-block bundle and must not mutate it. The
    replacer may return a new (L, width) attention output for the block, or
    None to keep the native one.
    """

    observers: Sequence[Observer] = ()
    replace: Optional[Replacer] = None


@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    weights: dict = field(repr=False)


# name -> shape, in draw order
def _weight_shapes(cfg: ModelConfig) -> list:
    D, C, hid = cfg.width, cfg.latent_channels, cfg.width * cfg.mlp_ratio
    shapes = [("embed", (cfg.vocab_size, D)), ("img_in", (C, D))]
    for b in range(cfg.n_double):
        for side in ("txt", "img"):
            p = f"double{b}.{side}."
            shapes += [(p + "qkv", (D, 3 * D)), (p + "proj", (D, D)),
                       (p + "mlp_in", (D, hid)), (p + "mlp_out", (hid, D))]
    for b in range(cfg.n_single):
        p = f"single{b}."
        shapes += [(p + "qkv", (D, 3 * D)), (p + "mlp_in", (D, hid)),
                   (p + "out", (D + hid, D))]
    shapes.append(("img_out", (D, C)))
    return shapes


def build_model(cfg: ModelConfig) -> Model:
    """Draw every weight from ``seeded_rng(cfg.weight_seed)``, scaled by 1/sqrt(d)."""
    rng = seeded_rng(cfg.weight_seed)
    scale = 1.0 / math.sqrt(cfg.d)
    weights = {}
    for name, shape in _weight_shapes(cfg):
        w = (rng.standard_normal(shape) * scale).astype(np.float32)
        w.setflags(write=False)
        weights[name] = w
    return Model(cfg, weights)


def _word_id(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.lower().encode("utf-8"), digest_size=8).digest()
    # id 0 is reserved for padding
    return 1 + int.from_bytes(digest, "little") % (vocab_size - 1)


def embed_prompt(prompt_text: str, cfg: ModelConfig) -> PromptLayout:
    """Hash a ``background | foreground [| action]`` prompt to token ids.

    Words are whitespace-split; the background segment comes first so
    ``l_bg`` and ``l_fg`` delimit the leading text positions. The sequence
    is truncated or zero-padded to ``cfg.l``.
    """
    segments = [s.strip() for s in prompt_text.split("|")]
    if len(segments) < 2 or len(segments) > 3:
        raise PromptFormatError(
            f"prompt needs 2 or 3 '|'-separated segments (background | foreground | action), "
            f"got {len(segments)}: {prompt_text!r}"
        )
    words = [seg.split() for seg in segments]
    if not words[0] or not words[1]:
        raise PromptFormatError(f"empty background or foreground segment in {prompt_text!r}")
    l_bg = min(len(words[0]), cfg.l - 1) if cfg.l > 1 else 1
    l_fg = min(len(words[1]), cfg.l - l_bg)
    if l_fg < 1:
        raise PromptFormatError(f"text length l={cfg.l} leaves no room for the foreground")
    flat = words[0][:l_bg] + words[1][:l_fg] + [w for seg in words[2:] for w in seg]
    ids = [_word_id(w, cfg.vocab_size) for w in flat[: cfg.l]]
    ids += [0] * (cfg.l - len(ids))
    return PromptLayout(l_bg=l_bg, l_fg=l_fg, token_ids=tuple(ids))


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + np.float32(1e-6))).astype(np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(math.sqrt(2.0 / math.pi))
    return (0.5 * x * (1.0 + np.tanh(c * (x + np.float32(0.044715) * x ** 3)))).astype(np.float32)


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * float(t) * freqs
    emb = np.concatenate([np.cos(ang), np.sin(ang)])
    if dim % 2:
        emb = np.append(emb, 0.0)
    return emb.astype(np.float32)


def attend(q, k, v, n_heads: int, additive_mask=None) -> np.ndarray:
    """Per-head softmax(q k^T / sqrt(d) + mask) v, heads concatenated.

    ``k`` and ``v`` may carry more rows than ``q``; ``additive_mask`` is
    (len(q), len(k)) and shared by all heads.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape != v.shape or q.shape[1] != k.shape[1] or q.shape[1] % n_heads:
        raise InputError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if additive_mask is not None and not np.any(additive_mask):
        additive_mask = None
    d = q.shape[1] // n_heads
    scale = np.float32(math.sqrt(d))
    outs = []
    for i in range(n_heads):
        sl = slice(i * d, (i + 1) * d)
        weights = masked_softmax_rows(matmul(q[:, sl], k[:, sl].T) / scale, additive_mask)
        outs.append(matmul(weights, v[:, sl]))
    return np.concatenate(outs, axis=1)


def unified_attention(q, k_no_pos, v, text_len: int, cfg: ModelConfig,
                      layer_index: int = 0, step=None) -> ActivationBundle:
    """Global attention over cat[text, image] with RoPE on image rows only."""
    q, k_no_pos, v = as_tensor(q), as_tensor(k_no_pos), as_tensor(v)
    if q.shape != (text_len + cfg.hw, cfg.width):
        raise InputError(f"expected sequence of shape {(text_len + cfg.hw, cfg.width)}, got {q.shape}")
    coords = grid_coords(cfg.h, cfg.w)
    q = q.copy()
    q[text_len:] = rope2d_apply(q[text_len:], coords, cfg.rope)
    k_pos = k_no_pos.copy()
    k_pos[text_len:] = rope2d_apply(k_no_pos[text_len:], coords, cfg.rope)
    out = attend(q, k_pos, v, cfg.n_heads)
    return ActivationBundle(layer_index, step, q, k_pos, k_no_pos, v, out, text_len, cfg.n_heads)


def _split_qkv(x: np.ndarray, w: np.ndarray):
    qkv = matmul(x, w)
    D = w.shape[0]
    return qkv[:, :D], qkv[:, D:2 * D], qkv[:, 2 * D:]


def _double_block(model: Model, b: int, x_txt, x_img):
    cfg, W = model.cfg, model.weights
    n_txt, n_img = _layer_norm(x_txt), _layer_norm(x_img)
    qt, kt, vt = _split_qkv(n_txt, W[f"double{b}.txt.qkv"])
    qi, ki, vi = _split_qkv(n_img, W[f"double{b}.img.qkv"])
    bundle = unified_attention(np.concatenate([qt, qi]), np.concatenate([kt, ki]),
                               np.concatenate([vt, vi]), len(x_txt), cfg, layer_index=b)
    attn = bundle.attn_out
    l = len(x_txt)
    new = []
    for side, x, a in (("txt", x_txt, attn[:l]), ("img", x_img, attn[l:])):
        p = f"double{b}.{side}."
        x = x + matmul(a, W[p + "proj"])
        x = x + matmul(_gelu(matmul(_layer_norm(x), W[p + "mlp_in"])), W[p + "mlp_out"])
        new.append(x)
    return new


def forward(model: Model, latent, layout: PromptLayout, t: float,
            hooks: Optional[Hooks] = None, step: Optional[int] = None) -> np.ndarray:
    """Velocity prediction for image latent tokens (hw, latent_channels).

    ``t`` is the noise level in [0, 1]; ``step`` is passed through to hooks.
    """
    cfg, W = model.cfg, model.weights
    latent = as_tensor(latent)
    if latent.shape != (cfg.hw, cfg.latent_channels):
        raise InputError(f"latent shape {latent.shape} != {(cfg.hw, cfg.latent_channels)}")
    if len(layout.token_ids) != cfg.l:
        raise InputError(f"prompt has {len(layout.token_ids)} tokens, model expects {cfg.l}")
    temb = timestep_embedding(t, cfg.width)
    x_txt = W["embed"][np.asarray(layout.token_ids)] + temb
    x_img = matmul(latent, W["img_in"]) + temb
    for b in range(cfg.n_double):
        x_txt, x_img = _double_block(model, b, x_txt, x_img)

    x = np.concatenate([x_txt, x_img])
    l = cfg.l
    for n in range(cfg.n_single):
        p = f"single{n}."
        nx = _layer_norm(x)
        q, k, v = _split_qkv(nx, W[p + "qkv"])
        bundle = unified_attention(q, k, v, l, cfg, layer_index=n, step=step)
        attn = bundle.attn_out
        if hooks is not None:
            try:
                for obs in hooks.observers:
                    obs(step, n, bundle)
                if hooks.replace is not None:
                    replaced = hooks.replace(step, n, bundle)
                    if replaced is not None:
                        attn = as_tensor(replaced)
                        if attn.shape != bundle.attn_out.shape:
                            raise InputError(f"replacement attention shape {attn.shape}")
            except HookError:
                raise
            except Exception as exc:
                raise HookError(step, n, exc) from exc
        mlp = _gelu(matmul(nx, W[p + "mlp_in"]))
        x = x + matmul(np.concatenate([attn, mlp], axis=1), W[p + "out"])

    return matmul(_layer_norm(x[l:]), W["img_out"])
