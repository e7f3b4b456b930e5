"""Run configuration: one flat set of knobs, a sectioned text file format,
CLI overrides, and a provenance hash embedded into every artifact.

The file format is diff-friendly ``key = value`` lines under ``[section]``
headers; unknown sections or keys are rejected. The canonical echo (fixed
section and key order) is what gets hashed and written into checkpoints
and reports.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ValidationError


@dataclass
class RunConfig:
    # [model]
    resolution: int = 32
    frames_per_window: int = 17
    patch: int = 4
    c_latent: int = 8
    width: int = 64
    n_blocks: int = 8
    l_blocks: int = 2
    gamma: float = 1.0
    text_tokens: int = 8
    t_steps: int = 50
    beta_start: float = 0.002
    beta_end: float = 0.2
    temporal_factor: int = 1
    ffn_mult: int = 4
    latent_scale: float = 0.35
    # [memory]
    d_feature: int = 32
    d_summary: int = 32
    d_kv: int = 32
    summarizer_depth: int = 8
    memory_layers: tuple[int, ...] = (3, 4, 5, 6)
    theta_seg: float = 0.1
    local_segments: int = 1
    # [train]
    seed: int = 0
    scenes: int = 6
    frames_per_scene: int = 130
    backbone_steps: int = 400
    sketchdit_steps: int = 300
    dglm_steps: int = 200
    ccr_updates: int = 10
    ccr_samples: int = 8
    lr_backbone: float = 1e-4
    lr_branch: float = 1e-4
    lr_fusion: float = 1e-4
    ccr_lr: float = 1e-6
    baseline_window: int = 64
    w_ref: int = 200
    grad_clip: float = 5.0
    # [generate]
    overlap: int = 4
    t_start: int = 20
    noise_scale: float = 1.0
    # [eval]
    rho: float = 0.25
    cap_db: float = 100.0
    eval_resize: int = 256

    def validate(self) -> "RunConfig":
        if self.resolution % self.patch:
            raise ValidationError("resolution must be divisible by patch")
        if self.n_blocks % 2:
            raise ValidationError("n_blocks must be even")
        if not 1 <= self.l_blocks < self.n_blocks:
            raise ValidationError("need 1 <= l_blocks < n_blocks")
        if self.temporal_factor != 1:
            raise ValidationError("only temporal_factor = 1 is supported")
        if not 0 < self.overlap < self.frames_per_window:
            raise ValidationError("need 0 < overlap < frames_per_window")
        if not 0 <= self.t_start <= self.t_steps:
            raise ValidationError("t_start must lie in [0, t_steps]")
        if not self.memory_layers:
            raise ValidationError("memory_layers must not be empty")
        for m in self.memory_layers:
            if not 1 <= m <= self.summarizer_depth:
                raise ValidationError("memory_layers must index the summarizer depth")
        if self.local_segments < 1:
            raise ValidationError("local_segments must be >= 1")
        if self.ccr_samples < 1:
            raise ValidationError("ccr_samples must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ValidationError("rho must lie in (0, 1)")
        return self


_SECTIONS = ("model", "memory", "train", "generate", "eval")

_SECTION_OF = {}
for _sec, _names in {
    "model": ("resolution", "frames_per_window", "patch", "c_latent", "width",
              "n_blocks", "l_blocks", "gamma", "text_tokens", "t_steps",
              "beta_start", "beta_end", "temporal_factor", "ffn_mult",
              "latent_scale"),
    "memory": ("d_feature", "d_summary", "d_kv", "summarizer_depth",
               "memory_layers", "theta_seg", "local_segments"),
    "train": ("seed", "scenes", "frames_per_scene", "backbone_steps",
              "sketchdit_steps", "dglm_steps", "ccr_updates", "ccr_samples",
              "lr_backbone", "lr_branch", "lr_fusion", "ccr_lr",
              "baseline_window", "w_ref", "grad_clip"),
    "generate": ("overlap", "t_start", "noise_scale"),
    "eval": ("rho", "cap_db", "eval_resize"),
}.items():
    for _n in _names:
        _SECTION_OF[_n] = _sec

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, text: str):
    ftype = _FIELD_TYPES[name]
    text = text.strip()
    try:
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype.startswith("tuple"):
            return tuple(int(p.strip()) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ValidationError(f"bad value for {name!r}: {text!r}") from exc
    return text


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    values = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ValidationError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SECTION_OF:
            raise ValidationError(f"line {lineno}: unknown key {key!r}")
        if section is not None and _SECTION_OF[key] != section:
            raise ValidationError(
                f"line {lineno}: key {key!r} belongs in [{_SECTION_OF[key]}]"
            )
        values[key] = _parse_value(key, val)
    return RunConfig(**values).validate()


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config_text(fh.read())
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    values = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in _SECTION_OF:
            raise ValidationError(f"unknown config key {key!r}")
        values[key] = val if not isinstance(val, str) else _parse_value(key, val)
    return RunConfig(**values).validate()


def canonical_text(cfg: RunConfig) -> str:
    """Fixed-order echo of every knob; the hashed provenance record."""
    lines = []
    for sec in _SECTIONS:
        lines.append(f"[{sec}]")
        for f in fields(RunConfig):
            if _SECTION_OF[f.name] == sec:
                lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]
