"""Training-free identity consistency for a toy multimodal diffusion transformer.

An identity image is sampled once while its single-block keys, values and
attention outputs are cached. Each frame is then sampled with point-tracking
attention over the matched identity tokens and an adaptive merge of their
attention outputs.
"""

from .correspondence import MatchResult, match_points, matching_error
from .diagnostics import accuracy_curve, dump_tensors, load_tensors, locality_rings
from .errors import (
    ConfigError,
    ConsistGenError,
    FormatError,
    HookError,
    InputError,
    PipelineOrderError,
    PromptFormatError,
    SamplingError,
)
from .masks import ForegroundMask, extract_raw_mask, mask_iou, morph_refine
from .model import Hooks, Model, ModelConfig, build_model, embed_prompt, forward
from .sampler import (
    IdentityCache,
    SamplerConfig,
    euler_sample,
    run_frame_pass,
    run_identity_pass,
    run_probe_pass,
)
from .tracking import adaptive_merge, point_tracking_attention, reencode_identity_keys

__all__ = [
    "ConfigError", "ConsistGenError", "ForegroundMask", "FormatError", "HookError", "Hooks",
    "IdentityCache", "InputError", "MatchResult", "Model", "ModelConfig", "PipelineOrderError",
    "PromptFormatError", "SamplerConfig", "SamplingError", "accuracy_curve", "adaptive_merge",
    "build_model", "dump_tensors", "embed_prompt", "euler_sample", "extract_raw_mask", "forward",
    "load_tensors", "locality_rings", "mask_iou", "match_points", "matching_error", "morph_refine",
    "point_tracking_attention", "reencode_identity_keys", "run_frame_pass", "run_identity_pass",
    "run_probe_pass",
]
