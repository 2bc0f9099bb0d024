"""Euler sampling and the identity / probe / frame passes.

Step indices are 1-based: step ``s`` evaluates the model at noise level
``sigma[s-1]`` and moves the latent to ``sigma[s]``.

Typical use::

    ident_latent, cache = run_identity_pass(model, id_layout, seed, cfg)
    match, frame_mask = run_probe_pass(model, frm_layout, seed, cfg, cache)
    latent = run_frame_pass(model, frm_layout, seed, cfg, cache, match, frame_mask)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .correspondence import MatchResult, match_points
from .errors import ConfigError, PipelineOrderError, SamplingError
from .masks import ForegroundMask, extract_raw_mask, morph_refine
from .model import Hooks, Model, PromptLayout, forward
from .numerics import seeded_rng
from .tracking import (
    GatherPlan,
    adaptive_merge,
    build_gather_plan,
    extend_attention,
    point_tracking_attention,
)


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 50
    extract_step: int = 11
    apply_until_step: int = 40
    alpha_start: float = 0.8
    keep_background: bool = False
    pta_enabled: bool = True
    merge_enabled: bool = True
    masking_enabled: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 1 <= self.extract_step <= self.n_steps:
            raise ConfigError(f"extract_step must lie in [1, n_steps], got {self.extract_step}")
        if not 0 <= self.apply_until_step <= self.n_steps:
            raise ConfigError(f"apply_until_step must lie in [0, n_steps], got {self.apply_until_step}")
        # apply_until_step == 0 switches the mechanisms off entirely
        if self.apply_until_step and self.extract_step > self.apply_until_step:
            raise ConfigError(
                f"extract_step ({self.extract_step}) must not exceed apply_until_step "
                f"({self.apply_until_step})"
            )
        if not 0.0 <= self.alpha_start <= 1.0:
            raise ConfigError(f"alpha_start must lie in [0, 1], got {self.alpha_start}")

    @property
    def schedule(self) -> "AlphaSchedule":
        return AlphaSchedule(self.alpha_start, self.apply_until_step)

    @property
    def any_mechanism(self) -> bool:
        return (self.pta_enabled or self.merge_enabled) and self.apply_until_step > 0


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_start: float
    apply_until_step: int


def alpha_at(t: int, schedule: AlphaSchedule) -> float:
    """Merge strength at step ``t``: linear from alpha_start at step 1 to 0 at the window end."""
    if t < 1:
        raise ConfigError(f"step index is 1-based, got {t}")
    end = schedule.apply_until_step
    if t >= end:
        return 0.0
    # end >= 2 here since 1 <= t < end
    return schedule.alpha_start * max(0.0, (end - t) / (end - 1))


def sigmas(n_steps: int) -> np.ndarray:
    return np.linspace(1.0, 0.0, n_steps + 1)


@dataclass
class CacheEntry:
    k_no_pos: np.ndarray
    v: np.ndarray
    attn_out: np.ndarray


@dataclass
class IdentityCache:
    """Identity-pass image-row activations per (step, single layer).

    ``entries`` covers steps 1..apply_until_step. ``match_features`` holds
    the per-layer attention outputs at the extraction step, which the probe
    pass matches against even when the mechanism window is empty.
    """

    h: int
    w: int
    n_single: int
    width: int
    extract_step: int
    apply_until_step: int
    entries: dict = field(default_factory=dict)
    match_features: list = field(default_factory=list)
    mask: Optional[ForegroundMask] = None

    def entry(self, step: int, layer: int) -> CacheEntry:
        try:
            return self.entries[(step, layer)]
        except KeyError:
            raise PipelineOrderError(f"no cached identity activations for step {step}, layer {layer}")

    def check_compatible(self, model: Model, cfg: SamplerConfig) -> None:
        mc = model.cfg
        for name, have, want in (("h", self.h, mc.h), ("w", self.w, mc.w),
                                 ("n_single", self.n_single, mc.n_single),
                                 ("width", self.width, mc.width),
                                 ("extract_step", self.extract_step, cfg.extract_step)):
            if have != want:
                raise ConfigError(f"cache {name}={have} does not match configured {name}={want}")
        if self.apply_until_step < cfg.apply_until_step:
            raise ConfigError(
                f"cache covers steps up to {self.apply_until_step}, "
                f"apply_until_step={cfg.apply_until_step} requested"
            )


def euler_integrate(velocity: Callable, x0: np.ndarray, n_steps: int,
                    n_evals: Optional[int] = None):
    """Rectified-flow Euler integration from sigma=1 to sigma=0.

    ``velocity(x, sigma, step)`` is called once per step. Returns the final
    latent and the trajectory (x0 first).
    """
    sig = sigmas(n_steps)
    n_evals = n_steps if n_evals is None else n_evals
    x = x0
    traj = [x0]
    for step in range(1, n_evals + 1):
        v = velocity(x, float(sig[step - 1]), step)
        x = (x + np.float32(sig[step] - sig[step - 1]) * v).astype(np.float32)
        if not np.isfinite(x).all():
            raise SamplingError(step)
        traj.append(x)
    return x, traj


def initial_latent(seed: int, shape) -> np.ndarray:
    return seeded_rng(seed).standard_normal(shape).astype(np.float32)


def euler_sample(model, layout: PromptLayout, seed: int, cfg: SamplerConfig,
                 hooks_for_step: Optional[Callable[[int], Optional[Hooks]]] = None,
                 n_evals: Optional[int] = None, shape=None):
    """Sample a latent from noise drawn with ``seed``.

    ``model`` is a :class:`Model` or any callable ``(x, layout, sigma, step)``
    returning a velocity; in the latter case pass ``shape``.
    """
    if isinstance(model, Model):
        shape = (model.cfg.hw, model.cfg.latent_channels)

        def velocity(x, sigma, step):
            hooks = hooks_for_step(step) if hooks_for_step else None
            return forward(model, x, layout, sigma, hooks=hooks, step=step)
    else:
        if shape is None:
            raise ConfigError("shape is required when sampling with a stub velocity model")

        def velocity(x, sigma, step):
            return np.asarray(model(x, layout, sigma, step), dtype=np.float32)

    return euler_integrate(velocity, initial_latent(seed, shape), cfg.n_steps, n_evals)


class StepRecorder:
    """Collects single-block bundles of selected steps."""

    def __init__(self, steps):
        self.steps = set(steps)
        self.bundles = {}

    def __call__(self, step, layer, bundle):
        if step in self.steps:
            self.bundles[(step, layer)] = bundle

    def at(self, step: int, n_layers: int):
        missing = [n for n in range(n_layers) if (step, n) not in self.bundles]
        if missing:
            raise PipelineOrderError(f"step {step} was not recorded for layers {missing}")
        return [self.bundles[(step, n)] for n in range(n_layers)]


def extract_frame_mask(bundles, layout: PromptLayout, h: int, w: int) -> ForegroundMask:
    """Raw image->text mask from a step's bundles, then morphological cleanup."""
    logits = [b.logits()[:, b.text_len:, :b.text_len] for b in bundles]
    raw = extract_raw_mask(logits, layout.l_bg, layout.l_fg, h, w)
    return morph_refine(raw, h, w)


def run_identity_pass(model: Model, layout: PromptLayout, seed: int, cfg: SamplerConfig):
    """Unmodified sampling that records what the frame passes need."""
    mc = model.cfg
    cache = IdentityCache(mc.h, mc.w, mc.n_single, mc.width, cfg.extract_step,
                          cfg.apply_until_step)
    recorder = StepRecorder([cfg.extract_step])

    def store(step, layer, bundle):
        if step <= cfg.apply_until_step:
            cache.entries[(step, layer)] = CacheEntry(
                bundle.image_rows("k_no_pos").copy(),
                bundle.image_rows("v").copy(),
                bundle.image_rows("attn_out").copy(),
            )

    hooks = Hooks(observers=(store, recorder))
    latent, _ = euler_sample(model, layout, seed, cfg, lambda step: hooks)
    bundles = recorder.at(cfg.extract_step, mc.n_single)
    cache.match_features = [b.image_rows("attn_out").copy() for b in bundles]
    if cfg.masking_enabled:
        cache.mask = extract_frame_mask(bundles, layout, mc.h, mc.w)
    else:
        cache.mask = ForegroundMask.full(mc.h, mc.w)
    return latent, cache


def probe_extract(model: Model, layout: PromptLayout, seed: int, cfg: SamplerConfig,
                  cache: IdentityCache, steps, observers=()):
    """Vanilla sampling up to max(steps); match + mask at each requested step.

    Matching at step ``s`` compares against the identity activations cached
    for that step (or the extraction-step features).
    """
    mc = model.cfg
    steps = sorted(set(int(s) for s in steps))
    for s in steps:
        if not 1 <= s <= cfg.n_steps:
            raise ConfigError(f"step {s} outside [1, {cfg.n_steps}]")
    recorder = StepRecorder(steps)
    hooks = Hooks(observers=(recorder, *observers))
    euler_sample(model, layout, seed, cfg, lambda step: hooks, n_evals=steps[-1])
    out = {}
    for s in steps:
        bundles = recorder.at(s, mc.n_single)
        if s == cache.extract_step and cache.match_features:
            ident = cache.match_features
        else:
            ident = [cache.entry(s, n).attn_out for n in range(mc.n_single)]
        match = match_points([b.image_rows("attn_out") for b in bundles], ident)
        if cfg.masking_enabled:
            mask = extract_frame_mask(bundles, layout, mc.h, mc.w)
        else:
            mask = ForegroundMask.full(mc.h, mc.w)
        out[s] = (match, mask)
    return out


def run_probe_pass(model: Model, layout: PromptLayout, seed: int, cfg: SamplerConfig,
                   cache: IdentityCache, observers=()):
    """Sample the frame prompt through the extraction step and read off match + mask."""
    if not cache.match_features:
        raise PipelineOrderError(
            f"identity cache has no activations at extract_step {cfg.extract_step}; "
            "run the identity pass first"
        )
    cache.check_compatible(model, cfg)
    steps = [cfg.extract_step]
    return probe_extract(model, layout, seed, cfg, cache, steps, observers)[cfg.extract_step]


def make_frame_hooks(model: Model, cfg: SamplerConfig, cache: IdentityCache,
                     match: MatchResult, frame_mask: ForegroundMask,
                     skip_rope: bool = False) -> Hooks:
    """Replace-hook that applies point-tracking attention and token merge."""
    mc = model.cfg
    identity_mask = cache.mask if cfg.masking_enabled else ForegroundMask.full(mc.h, mc.w)
    if not cfg.masking_enabled:
        frame_mask = ForegroundMask.full(mc.h, mc.w)
    plan = build_gather_plan(frame_mask, identity_mask, match, cfg.keep_background)
    schedule = cfg.schedule
    rows = mc.l + plan.c_fg_frm

    def replace(step, layer, bundle):
        if step is None or step > cfg.apply_until_step:
            return None
        entry = cache.entry(step, layer)
        if cfg.pta_enabled:
            ext = extend_attention(bundle, plan, frame_mask, entry.k_no_pos, entry.v,
                                   mc.rope, mc.h, mc.w, skip_rope=skip_rope)
            out = point_tracking_attention(ext)
        else:
            out = bundle.attn_out.copy()
        if cfg.merge_enabled:
            alpha = alpha_at(step, schedule)
            if alpha > 0.0 and plan.n_fg:
                out[rows] = adaptive_merge(out[rows], entry.attn_out[plan.c_fg_id],
                                           plan.s_conf, alpha)
        return out

    return Hooks(replace=replace)


def run_frame_pass(model: Model, layout: PromptLayout, seed: int, cfg: SamplerConfig,
                   cache: IdentityCache, match: MatchResult, frame_mask: ForegroundMask,
                   skip_rope: bool = False) -> np.ndarray:
    """Full sampling with the mechanisms active on steps 1..apply_until_step."""
    if not cfg.any_mechanism:
        latent, _ = euler_sample(model, layout, seed, cfg)
        return latent
    cache.check_compatible(model, cfg)
    mc = model.cfg
    if len(match.map_star) != mc.hw or frame_mask.bits.size != mc.hw:
        raise ConfigError(f"match/mask cover {len(match.map_star)} tokens, model grid has {mc.hw}")
    hooks = make_frame_hooks(model, cfg, cache, match, frame_mask, skip_rope)
    latent, _ = euler_sample(
        model, layout, seed, cfg,
        lambda step: hooks if step <= cfg.apply_until_step else None,
    )
    return latent


def gather_plan_for(cfg: SamplerConfig, cache: IdentityCache, match: MatchResult,
                    frame_mask: ForegroundMask) -> GatherPlan:
    """The plan a frame pass would use; handy for reports."""
    if not cfg.masking_enabled:
        full = ForegroundMask.full(cache.h, cache.w)
        return build_gather_plan(full, full, match, cfg.keep_background)
    return build_gather_plan(frame_mask, cache.mask, match, cfg.keep_background)
