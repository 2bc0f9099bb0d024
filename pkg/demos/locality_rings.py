"""
Why identity keys need new positions
====================================

When a frame attends to identity keys that keep their own grid positions,
a trained model with rotary positions tends to pile attention near the
query's own location. Summing one query's weights over equal-area rings
measures that bias. The second column is what the rings would hold if
position were ignored, which on a discrete grid is not exactly 1/K.

The toy model has random weights, so its rings sit close to the
position-blind column. The script shows the measurement, not the effect.
"""

import numpy as np

from consistgen import SamplerConfig, build_model, embed_prompt, locality_rings
from consistgen.config import DEFAULT_FRAME_PROMPTS, DEFAULT_IDENTITY_PROMPT
from consistgen.diagnostics import inter_image_attention
from consistgen.model import ModelConfig
from consistgen.sampler import StepRecorder, run_identity_pass, run_probe_pass

cfg = ModelConfig()
model = build_model(cfg)
sampler = SamplerConfig()
_, cache = run_identity_pass(model, embed_prompt(DEFAULT_IDENTITY_PROMPT, cfg), 1, sampler)

recorder = StepRecorder([sampler.extract_step])
layout = embed_prompt(DEFAULT_FRAME_PROMPTS[1], cfg)
run_probe_pass(model, layout, 1, sampler, cache, observers=(recorder,))
bundles = recorder.at(sampler.extract_step, cfg.n_single)
k0 = [cache.entry(sampler.extract_step, n).k_no_pos for n in range(cfg.n_single)]

# (hw, hw) block of frame image queries on identity image keys
attn = inter_image_attention(bundles, k0, cfg.rope, cfg.h, cfg.w)

n_rings = 4
totals = np.zeros(n_rings)
for q in range(cfg.hw):
    hist = locality_rings(attn, q, n_rings, cfg.h, cfg.w)
    # normalise per query so every query counts equally
    totals += hist.ring_sums / attn[q].sum()
share = totals / cfg.hw

# what each ring would get if attention ignored position entirely
uniform = np.zeros(n_rings)
for q in range(cfg.hw):
    uniform += locality_rings(np.full(cfg.hw, 1 / cfg.hw), q, n_rings, cfg.h, cfg.w).ring_sums
uniform /= cfg.hw

print("ring  observed share  position-blind share")
for k in range(n_rings):
    print(f"{k:4d}  {share[k]:14.3f}  {uniform[k]:20.3f}")

centre = (cfg.h // 2) * cfg.w + cfg.w // 2
hist = locality_rings(attn, centre, n_rings, cfg.h, cfg.w)
print("\ncentre query ring radii:", np.round(hist.ring_radii, 3))
print("centre query ring sums: ", np.round(hist.ring_sums, 4))
