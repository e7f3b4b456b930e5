"""Command-line entry points for data generation, staged training,
long-sequence colorization, and evaluation.

Exit codes: 0 ok, 2 usage or validation problem, 3 contract violation
(wrong stage order, gate misuse, refused mismatch), 4 I/O or file-format
problem. All paths are resolved relative to ``--workdir``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import RunConfig, apply_overrides, config_hash, load_config
from .errors import (ContractViolation, FormatError, IngestionError,
                     LongcolorError, ValidationError)
from .eval_metrics import (build_report, decay_ratio, default_horizons,
                           frequency_split_psnr, normalize_frames)
from .fusion_inference import GenerationSession, generate_long, plan_segments
from .media_io import (FrameSequence, read_frame_dir, read_ppm,
                       read_sketch_dir, write_frame_dir)
from .pipeline import (Colorizer, build_dataset, load_checkpoint, load_dataset,
                       run_stage, save_checkpoint, save_dataset)
from .color_reward import reward_curve_csv
from .tensor_core import Rng

_CONFIG_STAGE_SECTIONS = ("train", "generate", "eval")


def _resolve(workdir: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else workdir / path


def _load_cfg(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(_resolve(args.workdir, args.config))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        overrides[key] = val
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def _check_continuation_overrides(args) -> None:
    """Shape-defining keys may not change when continuing from a checkpoint."""
    for item in getattr(args, "set", None) or []:
        key = item.split("=", 1)[0].strip()
        section = cfgmod._SECTION_OF.get(key)
        if section is not None and section not in _CONFIG_STAGE_SECTIONS:
            raise ValidationError(
                f"--set {key}: [{section}] keys cannot change on a checkpoint")


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve(args.workdir, args.out)
    samples = build_dataset(cfg)
    save_dataset(out, samples, cfg)
    print(f"wrote {len(samples)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    data_dir = _resolve(args.workdir, args.data)
    dataset = load_dataset(data_dir)
    if args.stage == "sketchdit":
        if args.checkpoint:
            raise ValidationError("stage sketchdit starts fresh; drop --checkpoint")
        cfg = _load_cfg(args)
        model = Colorizer(cfg)
    else:
        if not args.checkpoint:
            raise ContractViolation(
                f"stage {args.stage} requires the previous stage's checkpoint")
        _check_continuation_overrides(args)
        model = load_checkpoint(_resolve(args.workdir, args.checkpoint))
        if getattr(args, "set", None):
            overrides = dict(s.split("=", 1) for s in args.set)
            model.cfg = apply_overrides(model.cfg, overrides)
    result = run_stage(model, args.stage, dataset)
    out = _resolve(args.workdir, args.out)
    save_checkpoint(out, model)
    if args.stage == "ccr" and result is not None:
        curve_path = out.with_suffix(".reward.csv")
        curve_path.write_text(reward_curve_csv(result), encoding="utf-8")
        print(f"reward curve: {curve_path}")
    print(f"stage {args.stage} complete; checkpoint: {out}")
    return 0


def cmd_colorize(args) -> int:
    model = load_checkpoint(_resolve(args.workdir, args.checkpoint))
    cfg = model.cfg
    sketches = read_sketch_dir(_resolve(args.workdir, args.sketches))
    ref_u8 = read_ppm(_resolve(args.workdir, args.reference))
    if ref_u8.shape[:2] != (cfg.resolution, cfg.resolution):
        raise ContractViolation(
            f"reference resolution {ref_u8.shape[:2]} does not match the "
            f"model's {cfg.resolution}x{cfg.resolution}")
    ref = ref_u8.astype(np.float32) / 255.0
    f_window = args.segment_frames or cfg.frames_per_window
    overlap = args.overlap if args.overlap is not None else cfg.overlap
    t_start = args.t_start if args.t_start is not None else cfg.t_start
    seed = args.seed if args.seed is not None else cfg.seed
    plan = plan_segments(args.frames, f_window, overlap, t_start)
    tag = args.tag or ""
    session = GenerationSession(plan=plan, ref_frame=ref,
                                rng=Rng(seed).child("colorize"),
                                use_memory=not args.no_memory)
    frames = generate_long(model, session, sketches, tag,
                           noise_scale=cfg.noise_scale)
    out = _resolve(args.workdir, args.out)
    write_frame_dir(out, frames)
    manifest = [
        f"config_hash = {config_hash(cfg)}",
        f"seed = {seed}",
        f"frames = {plan.total}",
        f"segment_frames = {plan.frames}",
        f"overlap = {plan.overlap}",
        f"t_start = {plan.t_start}",
        f"memory = {int(not args.no_memory)}",
        f"tag = {tag}",
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n",
                                      encoding="utf-8")
    print(f"wrote {plan.total} frames to {out}")
    return 0


def _manifest_hash(dirpath: Path) -> str:
    mf = dirpath / "manifest.txt"
    if mf.exists():
        for line in mf.read_text(encoding="utf-8").splitlines():
            if line.startswith("config_hash ="):
                return line.split("=", 1)[1].strip()
    return ""


def _load_eval_pair(args):
    gen_dir = _resolve(args.workdir, args.gen)
    ref_dir = _resolve(args.workdir, args.ref)
    gen = read_frame_dir(gen_dir)
    ref = read_frame_dir(ref_dir)
    if gen.resolution != ref.resolution and not args.force:
        raise ContractViolation(
            f"resolution mismatch {gen.resolution} vs {ref.resolution}; "
            "pass --force to evaluate anyway")
    n = min(len(gen), len(ref))
    if len(gen) != len(ref):
        if not args.force:
            raise ContractViolation(
                f"length mismatch {len(gen)} vs {len(ref)}; pass --force to "
                "truncate to the shorter sequence")
        gen = FrameSequence(gen.frames[:n], encoding="u8")
        ref = FrameSequence(ref.frames[:n], encoding="u8")
    return gen, ref, _manifest_hash(gen_dir)


def cmd_evaluate(args) -> int:
    gen, ref, ghash = _load_eval_pair(args)
    report = build_report(gen, ref, rho=args.rho, cap_db=args.cap_db,
                          resize=args.resize, config_hash=ghash)
    csv_path = _resolve(args.workdir, args.out_csv)
    rpt_path = _resolve(args.workdir, args.out_report)
    csv_path.write_text(report.csv_text(), encoding="utf-8")
    rpt_path.write_text(report.summary_text(), encoding="utf-8")
    print(f"mean_psnr = {report.mean_psnr:.4f}")
    print(f"mean_ssim = {report.mean_ssim:.4f}")
    print(f"csv: {csv_path}")
    print(f"report: {rpt_path}")
    return 0


def cmd_analyze_frequency(args) -> int:
    gen, ref, _ = _load_eval_pair(args)
    g = normalize_frames(gen, args.resize)
    r = normalize_frames(ref, args.resize)
    low, high = frequency_split_psnr(g, r, args.rho, args.cap_db)
    horizons = default_horizons(len(g))
    d_low = decay_ratio(low, horizons)
    d_high = decay_ratio(high, horizons)
    lines = ["horizon,decay_low,decay_high"]
    for h in horizons:
        lines.append(f"{h},{d_low[h]:.8f},{d_high[h]:.8f}")
    out = _resolve(args.workdir, args.out)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"decay csv: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="longcolor",
        description="sketch-driven video colorization with global-local memory",
    )
    ap.add_argument("--workdir", default=".", help="base for relative paths")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True,
                   choices=("sketchdit", "dglm", "ccr"))
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", default="data")
    p.add_argument("--checkpoint", help="checkpoint of the previous stage")
    p.add_argument("--out", default="model.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("colorize", help="generate a long colorized sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sketches", required=True, help="sketch frame directory")
    p.add_argument("--reference", required=True, help="reference PPM frame")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--segment-frames", type=int, dest="segment_frames")
    p.add_argument("--overlap", type=int)
    p.add_argument("--t-start", type=int, dest="t_start")
    p.add_argument("--seed", type=int)
    p.add_argument("--tag", default="")
    p.add_argument("--no-memory", action="store_true")
    p.add_argument("--out", default="generated")
    p.set_defaults(func=cmd_colorize)

    for name, fn in (("evaluate", cmd_evaluate),
                     ("analyze-frequency", cmd_analyze_frequency)):
        p = sub.add_parser(name)
        p.add_argument("--gen", required=True)
        p.add_argument("--ref", required=True)
        p.add_argument("--rho", type=float, default=0.25)
        p.add_argument("--cap-db", type=float, default=100.0, dest="cap_db")
        p.add_argument("--resize", type=int, default=256)
        p.add_argument("--force", action="store_true")
        if name == "evaluate":
            p.add_argument("--out-csv", default="metrics.csv", dest="out_csv")
            p.add_argument("--out-report", default="report.txt",
                           dest="out_report")
        else:
            p.add_argument("--out", default="decay.csv")
        p.set_defaults(func=fn)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    args.workdir = Path(args.workdir)
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3
    except (ValidationError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, IngestionError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except LongcolorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
