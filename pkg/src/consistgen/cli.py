"""``consistgen`` command line: identity, frame, diagnose, selfcheck."""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from . import selfcheck
from .config import RunConfig, ablation_key, format_config, parse_config
from .diagnostics import (
    accuracy_curve,
    cache_from_tensors,
    cache_to_tensors,
    dump_tensors,
    format_accuracy_table,
    format_ring_table,
    inter_image_attention,
    load_tensors,
    locality_rings,
    match_to_tensors,
)
from .errors import ConfigError, FormatError, PromptFormatError
from .masks import ForegroundMask
from .model import build_model, embed_prompt
from .sampler import (
    StepRecorder,
    gather_plan_for,
    probe_extract,
    run_frame_pass,
    run_identity_pass,
    run_probe_pass,
)

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_PROMPT = 4
EXIT_FORMAT = 5
EXIT_PROPERTY = 6
EXIT_MISSING = 7


class MissingInput(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR", help="output directory (CCTF_OUT overrides)")
    p.add_argument("--keep-background", type=_bool, metavar="BOOL")
    p.add_argument("--disable", action="append", default=[], choices=["pta", "merge", "masking"])
    p.add_argument("--steps", type=int)
    p.add_argument("--extract-step", type=int)
    p.add_argument("--apply-until", type=int)
    p.add_argument("--alpha-start", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consistgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identity", help="generate the identity latent and its cache")
    _common(p)

    p = sub.add_parser("frame", help="generate one frame consistent with the cached identity")
    _common(p)
    p.add_argument("--cache", metavar="PATH")
    p.add_argument("--frame-index", type=int, default=0)

    p = sub.add_parser("diagnose", help="ring or accuracy tables")
    p.add_argument("kind", choices=["rings", "accuracy"])
    _common(p)
    p.add_argument("--attn", metavar="PATH", help="rings: CCTF file with an 'attn' entry")
    p.add_argument("--query", type=int, help="rings: query token index (default: grid centre)")
    p.add_argument("--rings", type=int, default=4)
    p.add_argument("--cache", metavar="PATH")
    p.add_argument("--frame-index", type=int, default=0)
    p.add_argument("--ground-truth", metavar="PATH",
                   help="accuracy: CCTF with 'map_star' and 'mask' (default: self-match reference)")

    p = sub.add_parser("selfcheck", help="run the oracle/property suite")
    p.add_argument("--debug-skip-reencode", action="store_true",
                   help="omit RoPE re-encoding of identity keys (should make a check fail)")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config file {path} not found")
        cfg = parse_config(path.read_text())
    else:
        cfg = RunConfig()
    changes = {}
    for flag, key in (("seed", "seed"), ("out", "out"), ("keep_background", "keep_background"),
                      ("steps", "n_steps"), ("extract_step", "extract_step"),
                      ("apply_until", "apply_until_step"), ("alpha_start", "alpha_start")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    for name in getattr(args, "disable", []):
        changes[ablation_key(name)] = False
    if os.environ.get("CCTF_OUT"):
        changes["out"] = os.environ["CCTF_OUT"]
    return cfg.replace(**changes).validate()


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"{path} not found")
    return load_tensors(path)


def cmd_identity(cfg: RunConfig, stdout) -> int:
    out = _out_dir(cfg)
    model = build_model(cfg.model)
    layout = embed_prompt(cfg.identity_prompt, cfg.model)
    latent, cache = run_identity_pass(model, layout, cfg.seed, cfg.sampler)
    grid = np.array([cfg.model.h, cfg.model.w], dtype=np.int32)
    dump_tensors(out / "identity_latent.cctf", {"latent": latent, "meta/grid": grid})
    dump_tensors(out / "identity_cache.cctf", cache_to_tensors(cache))
    dump_tensors(out / "identity_mask.cctf", {"mask": cache.mask})
    (out / "run.cfg").write_text(format_config(cfg))
    print(f"identity: {len(cache.entries)} cache entries, foreground fraction "
          f"{cache.mask.fg_fraction:.3f} -> {out}", file=stdout)
    return EXIT_OK


def _cache_path(args, cfg: RunConfig) -> Path:
    return Path(args.cache) if args.cache else Path(cfg.out) / "identity_cache.cctf"


def _frame_prompt(cfg: RunConfig, index: int) -> str:
    if not 0 <= index < len(cfg.frame_prompts):
        raise ConfigError(f"frame_index {index} out of range (have {len(cfg.frame_prompts)} frame prompts)")
    return cfg.frame_prompts[index]


def cmd_frame(cfg: RunConfig, cache_path, index: int, stdout) -> int:
    cache = cache_from_tensors(_load(cache_path))
    out = _out_dir(cfg)
    model = build_model(cfg.model)
    layout = embed_prompt(_frame_prompt(cfg, index), cfg.model)
    cache.check_compatible(model, cfg.sampler)

    recorder = StepRecorder([cfg.sampler.extract_step])
    match, mask = run_probe_pass(model, layout, cfg.seed, cfg.sampler, cache, observers=(recorder,))
    latent = run_frame_pass(model, layout, cfg.seed, cfg.sampler, cache, match, mask)
    plan = gather_plan_for(cfg.sampler, cache, match, mask)

    attn = None
    step = cfg.sampler.extract_step
    if (step, 0) in cache.entries:
        k0 = [cache.entry(step, n).k_no_pos for n in range(cfg.model.n_single)]
        attn = inter_image_attention(recorder.at(step, cfg.model.n_single), k0,
                                     cfg.model.rope, cfg.model.h, cfg.model.w)

    grid = np.array([cfg.model.h, cfg.model.w], dtype=np.int32)
    stem = f"frame_{index}"
    dump_tensors(out / f"{stem}_latent.cctf", {"latent": latent, "meta/grid": grid})
    dump_tensors(out / f"{stem}_match.cctf", match_to_tensors(match))
    dump_tensors(out / f"{stem}_mask.cctf", {"mask": mask})
    if attn is not None:
        dump_tensors(out / f"{stem}_attn.cctf", {"attn": attn, "meta/grid": grid})

    sc = cfg.sampler
    report = [
        ("frame_index", index),
        ("fg_fraction", repr(mask.fg_fraction)),
        ("mean_s_conf", repr(float(np.mean(plan.s_conf))) if plan.n_fg else "nan"),
        ("keep_background", str(sc.keep_background).lower()),
        ("identity_fg_keys_appended", plan.n_fg if sc.pta_enabled else 0),
        ("identity_bg_keys_appended", plan.n_bg if sc.pta_enabled else 0),
        ("pta_enabled", str(sc.pta_enabled).lower()),
        ("merge_enabled", str(sc.merge_enabled).lower()),
        ("masking_enabled", str(sc.masking_enabled).lower()),
    ]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["key", "value"])
    writer.writerows(report)
    (out / f"{stem}_report.csv").write_text(buf.getvalue())
    stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_diagnose_rings(cfg: RunConfig, args, stdout) -> int:
    path = args.attn or Path(cfg.out) / f"frame_{args.frame_index}_attn.cctf"
    tensors = _load(path)
    if "attn" not in tensors:
        raise FormatError("content", f"{path} has no 'attn' entry")
    attn = tensors["attn"]
    if "meta/grid" in tensors:
        h, w = (int(x) for x in tensors["meta/grid"])
    else:
        h, w = cfg.model.h, cfg.model.w
    query = args.query if args.query is not None else (h // 2) * w + w // 2
    hist = locality_rings(attn, query, args.rings, h, w)
    stdout.write(format_ring_table(hist))
    return EXIT_OK


def cmd_diagnose_accuracy(cfg: RunConfig, args, stdout) -> int:
    cache = cache_from_tensors(_load(_cache_path(args, cfg)))
    model = build_model(cfg.model)
    layout = embed_prompt(_frame_prompt(cfg, args.frame_index), cfg.model)
    cache.check_compatible(model, cfg.sampler)
    if args.ground_truth:
        gt = _load(args.ground_truth)
        try:
            gt_map = gt["map_star"].astype(np.int64)
            gt_mask = ForegroundMask.from_grid(gt["mask"])
        except KeyError as exc:
            raise FormatError("content", f"ground truth lacks {exc.args[0]!r}") from None
    else:
        gt_map = np.arange(cfg.model.hw)
        gt_mask = cache.mask
    steps = sorted({s for s, _ in cache.entries} | {cache.extract_step})
    ext = probe_extract(model, layout, cfg.seed, cfg.sampler, cache, steps)
    rows = accuracy_curve(ext, gt_map, gt_mask, cfg.sampler.n_steps)
    table = format_accuracy_table(rows)
    (_out_dir(cfg) / f"accuracy_{args.frame_index}.csv").write_text(table)
    stdout.write(table)
    return EXIT_OK


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            failures = selfcheck.run_all({"skip_reencode": args.debug_skip_reencode},
                                         out=lambda line: print(line, file=stdout))
            if failures:
                print("failed: " + ", ".join(failures), file=stderr)
                return EXIT_PROPERTY
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "identity":
            return cmd_identity(cfg, stdout)
        if args.command == "frame":
            return cmd_frame(cfg, _cache_path(args, cfg), args.frame_index, stdout)
        if args.kind == "rings":
            return cmd_diagnose_rings(cfg, args, stdout)
        return cmd_diagnose_accuracy(cfg, args, stdout)
    except PromptFormatError as exc:
        print(f"prompt format error: {exc}", file=stderr)
        return EXIT_PROMPT
    except ConfigError as exc:
        print(f"config error: {exc}", file=stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=stderr)
        return EXIT_FORMAT
    except MissingInput as exc:
        print(f"missing input: {exc}", file=stderr)
        return EXIT_MISSING


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
