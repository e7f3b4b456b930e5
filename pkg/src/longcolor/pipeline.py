"""Model bundle, synthetic dataset plumbing, staged training, checkpoints.

One :class:`Colorizer` owns every component behind a single parameter
store. Training runs in three stages with frozen complements:

* ``sketchdit`` — pretrains the base denoiser (conditioning: reference +
  text), then freezes it, initializes the control branch from its first L
  blocks and trains the branch through the injections.
* ``dglm`` — freezes backbone and branch, trains the memory projectors and
  cross-attention on windows with ground-truth history.
* ``ccr`` — score-function reward refinement of branch + fusion weights.

Checkpoints are a single file: a text header (canonical config echo plus a
``[state]`` section with completed stages and the config hash) followed by
named LANM blobs for every parameter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .color_reward import (KvFeatureReward, PolicyGradient, RewardConfig,
                           RewardSample, ccr_training_stage)
from .config import RunConfig, canonical_text, config_hash, parse_config_text
from .dglm_memory import (FrameFeatureExtractor, FusionStack, KvMaps,
                          MemoryState, Summarizer, dynamic_segment)
from .errors import ContractViolation, FormatError, ValidationError
from .layers import AdamOpt, ParamStore, Sgd
from .media_io import (PALETTE, FrameSequence, ObjectSpec, SketchSequence,
                       SyntheticScene, format_scene_spec, generate_scene,
                       parse_scene_spec, read_frame_dir, read_sketch_dir,
                       write_frame_dir, write_ppm, write_sketch_dir)
from .sketch_dit import (ControlBranch, HybridFeature, control_latent_for_window,
                         sample_reference_frame)
from .tensor_core import DTYPE, Rng, read_blob, write_blob
from .toy_backbone import (DenoiseSchedule, LatentCodec, ToyBackbone,
                           TransitionRecord, gaussian_log_prob, pad_reference,
                           tokenize)

CKPT_MAGIC = b"LANMCKPT"
CKPT_VERSION = 1

TRAINABLE_REWARD_PREFIXES = ("sketchdit/", "fusion/")


class Colorizer:
    """Every component of the stack behind one parameter store."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore()
        rng = Rng(cfg.seed).child("model")
        self.frame_codec = LatentCodec(cfg.patch, cfg.c_latent,
                                       rng.child("codec_rgb"), channels=3,
                                       latent_scale=cfg.latent_scale)
        self.sketch_codec = LatentCodec(cfg.patch, cfg.c_latent,
                                        rng.child("codec_sketch"), channels=2,
                                        latent_scale=cfg.latent_scale)
        self.schedule = DenoiseSchedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)
        self.backbone = ToyBackbone(self.store, cfg, rng, schedule=self.schedule)
        self.branch = ControlBranch(self.store, cfg, rng)
        self.extractor = FrameFeatureExtractor(cfg.patch, cfg.d_feature,
                                               rng.child("feat"))
        self.summarizer = Summarizer(self.store, cfg.summarizer_depth,
                                     cfg.d_feature, cfg.d_summary,
                                     rng.child("summarizer"))
        self.kv_maps = KvMaps(self.store, cfg.memory_layers,
                              cfg.summarizer_depth, cfg.d_summary, cfg.d_kv,
                              rng.child("kv"))
        self.fusion = FusionStack(self.store, len(cfg.memory_layers), cfg.d_kv,
                                  cfg.width, rng.child("fusion"),
                                  kv_maps=self.kv_maps)
        self.stages_done: list[str] = []

    # ---- generation-facing plumbing -------------------------------------

    def latent_window_shape(self, frames: int | None = None
                            ) -> tuple[int, int, int, int]:
        hp, wp = self.frame_codec.latent_hw(self.cfg.resolution,
                                            self.cfg.resolution)
        f = self.cfg.frames_per_window if frames is None else frames
        return (f, self.cfg.c_latent, hp, wp)

    def text_ids(self, tag: str) -> np.ndarray:
        return tokenize(tag, self.cfg.text_tokens)

    def encode_ref(self, ref_frame: np.ndarray,
                   frames: int | None = None) -> np.ndarray:
        lat = self.frame_codec.encode(np.asarray(ref_frame, dtype=DTYPE)[None])
        f = self.cfg.frames_per_window if frames is None else frames
        return pad_reference(lat, f)

    def hybrid(self, sketch_bits: np.ndarray, ref_pad: np.ndarray,
               text_ids: np.ndarray, segment_id: int = 0) -> HybridFeature:
        ctrl = self._control_latent(sketch_bits, ref_pad)
        feat, _ = self.branch.hybrid_features(ctrl, text_ids, self.backbone,
                                              segment_id=segment_id)
        return feat

    def _control_latent(self, sketch_bits: np.ndarray,
                        ref_pad: np.ndarray) -> np.ndarray:
        from .sketch_dit import build_control_input, encode_sketch_tokens
        c_k = encode_sketch_tokens(self.sketch_codec, sketch_bits)
        return build_control_input(c_k, ref_pad)

    def fuse_hybrid(self, hybrid: HybridFeature,
                    memory: MemoryState) -> HybridFeature:
        cache = self.fusion.build_cache(memory.summaries(),
                                        self.cfg.local_segments)
        tokens, _ = self.fusion.fuse(hybrid.tokens, cache)
        return HybridFeature(tokens=tokens, segment_id=hybrid.segment_id)

    def predict(self, z: np.ndarray, t: int, ref_pad: np.ndarray,
                text_ids: np.ndarray,
                hybrid: HybridFeature | None = None) -> np.ndarray:
        feat = hybrid.tokens if hybrid is not None else None
        eps, _ = self.backbone.forward(z, ref_pad, text_ids, t,
                                       inject_feat=feat)
        return eps

    def decode(self, z0: np.ndarray) -> np.ndarray:
        return self.frame_codec.decode(z0)

    def new_memory(self) -> MemoryState:
        return MemoryState(self.extractor, self.summarizer, self.cfg.theta_seg)


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------


@dataclass
class SceneSample:
    scene: SyntheticScene
    frames: FrameSequence
    sketches: SketchSequence
    tag: str


def make_scene(index: int, size: int, frames: int, seed: int) -> SyntheticScene:
    """Deterministic scene family: one moving shape, varied color/path."""
    rng = Rng(seed).child("scene", index)
    colors = list(PALETTE.values())
    shapes = ("square", "circle", "triangle")
    paths = ("drift", "orbit", "bounce")
    color = colors[int(rng.integers(0, len(colors)))]
    shape = shapes[int(rng.integers(0, len(shapes)))]
    path = paths[int(rng.integers(0, len(paths)))]
    return SyntheticScene(
        objects=[ObjectSpec(shape=shape, color=color, path=path,
                            size_frac=0.3)],
        frames=frames, size=size, seed=seed * 1000 + index,
    )


def build_dataset(cfg: RunConfig) -> list[SceneSample]:
    samples = []
    for i in range(cfg.scenes):
        scene = make_scene(i, cfg.resolution, cfg.frames_per_scene, cfg.seed)
        frames, sketches, tag = generate_scene(scene)
        samples.append(SceneSample(scene, frames, sketches, tag))
    return samples


def save_dataset(root: Path | str, samples: list[SceneSample],
                 cfg: RunConfig) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"config_hash = {config_hash(cfg)}", f"scenes = {len(samples)}"]
    for i, s in enumerate(samples):
        d = root / f"scene_{i:03d}"
        write_frame_dir(d / "frames", s.frames)
        write_sketch_dir(d / "sketches", s.sketches)
        write_ppm(d / "ref.ppm", s.frames.to_u8().frames[0])
        (d / "tag.txt").write_text(s.tag + "\n", encoding="utf-8")
        (d / "scene.cfg").write_text(format_scene_spec(s.scene), encoding="utf-8")
        lines.append(f"scene_{i:03d} = {s.tag}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(root: Path | str) -> list[SceneSample]:
    root = Path(root)
    if not (root / "manifest.txt").exists():
        raise ValidationError(f"{root}: not a dataset directory (no manifest)")
    samples = []
    for d in sorted(root.glob("scene_*")):
        scene = parse_scene_spec((d / "scene.cfg").read_text(encoding="utf-8"))
        frames = read_frame_dir(d / "frames").to_unit()
        sketches = read_sketch_dir(d / "sketches")
        tag = (d / "tag.txt").read_text(encoding="utf-8").strip()
        samples.append(SceneSample(scene, frames, sketches, tag))
    if not samples:
        raise ValidationError(f"{root}: dataset holds no scenes")
    return samples


# ---------------------------------------------------------------------------
# Training stages
# ---------------------------------------------------------------------------


def _pick_window(sample: SceneSample, f_window: int, rng: Rng,
                 min_start: int = 0) -> int:
    hi = len(sample.frames) - f_window
    if hi < min_start:
        raise ValidationError("scene too short for the training window")
    return int(rng.integers(min_start, hi + 1))


def _window_inputs(model: Colorizer, sample: SceneSample, start: int,
                   rng: Rng):
    cfg = model.cfg
    f = cfg.frames_per_window
    frames = sample.frames.frames[start:start + f]
    bits = sample.sketches.bits[start:start + f]
    ref_idx = sample_reference_frame(len(sample.frames), (start, f),
                                     cfg.w_ref, rng.child("ref"))
    ref_pad = model.encode_ref(sample.frames.frames[ref_idx])
    ids = model.text_ids(sample.tag)
    z0 = model.frame_codec.encode(frames)
    return frames, bits, ref_pad, ids, z0


def _loss_step(model: Colorizer, z0: np.ndarray, rng: Rng):
    """Draw (t, eps, z_t); return them plus the noisy latent."""
    t = int(rng.integers(1, model.cfg.t_steps + 1))
    eps = rng.normal(z0.shape)
    z_t = model.schedule.q_sample(z0, t, eps)
    return t, eps, z_t


def train_loss(model: Colorizer, batch: list[tuple[np.ndarray, np.ndarray,
                                                   np.ndarray]],
               rng: Rng) -> float:
    """Mean over the batch of ||eps - eps_hat||^2 at uniformly drawn steps.

    Batch entries are (z0, ref_pad, text_ids) triples; no gradients.
    """
    total = 0.0
    for i, (z0, ref_pad, ids) in enumerate(batch):
        t, eps, z_t = _loss_step(model, z0, rng.child("item", i))
        eps_hat = model.predict(z_t, t, ref_pad, ids)
        d = (eps_hat - eps).astype(np.float64)
        total += float(np.sum(d * d))
    return total / len(batch)


def _branch_step(model: Colorizer, dataset: list[SceneSample], r: Rng,
                 opt, log: list | None, phase: str) -> None:
    """One control-branch training step (shared by both stage-1 phases)."""
    cfg = model.cfg
    sample = dataset[int(r.integers(0, len(dataset)))]
    start = _pick_window(sample, cfg.frames_per_window, r.child("win"))
    _, bits, ref_pad, ids, z0 = _window_inputs(model, sample, start, r)
    ctrl = model._control_latent(bits, ref_pad)
    feat, bcache = model.branch.hybrid_features(ctrl, ids, model.backbone)
    t, eps, z_t = _loss_step(model, z0, r.child("noise"))
    eps_hat, cache = model.backbone.forward(z_t, ref_pad, ids, t,
                                            inject_feat=feat.tokens)
    diff = eps_hat - eps
    if log is not None:
        log.append((phase, float(np.sum(diff.astype(np.float64) ** 2))))
    w = model.schedule.x0_weight(t)
    d_inj = model.backbone.backward(cache, (2.0 * w / diff.size) * diff)
    if d_inj is not None:
        model.branch.backward(bcache, d_inj, model.backbone)
    opt.step()
    model.store.zero_grads()


def train_stage_sketchdit(model: Colorizer, dataset: list[SceneSample],
                          log: list | None = None) -> None:
    """Stage 1: pretrain the base denoiser, then train the control branch.

    Phase A pretrains the backbone jointly with a scratch control branch so
    the base model learns to respond to injected features (the stand-in has
    no published weights, and a base pretrained blind to injections stays
    blind once frozen). The branch is then re-initialized from the
    backbone's first L blocks, the backbone freezes, and phase B trains the
    branch alone, mirroring the frozen-base recipe at full scale.
    """
    cfg = model.cfg
    store = model.store
    rng = Rng(cfg.seed).child("train-sketchdit")
    opt = AdamOpt(store, cfg.lr_backbone, ("backbone/", "sketchdit/"),
                  cfg.grad_clip)
    for step in range(cfg.backbone_steps):
        _branch_step(model, dataset, rng.child("pre", step), opt, log,
                     "backbone")

    model.branch.init_from_backbone(store)
    opt = AdamOpt(store, cfg.lr_branch, ("sketchdit/",), cfg.grad_clip)
    for step in range(cfg.sketchdit_steps):
        _branch_step(model, dataset, rng.child("branch", step), opt, log,
                     "sketchdit")
    model.stages_done.append("sketchdit")


def extend_branch_training(model: Colorizer, dataset: list[SceneSample],
                           steps: int, log: list | None = None) -> None:
    """Extra frozen-backbone branch steps (budget-matched baselines)."""
    cfg = model.cfg
    rng = Rng(cfg.seed).child("train-sketchdit-extend")
    opt = AdamOpt(model.store, cfg.lr_branch, ("sketchdit/",), cfg.grad_clip)
    for step in range(steps):
        _branch_step(model, dataset, rng.child("ext", step), opt, log,
                     "sketchdit-ext")


def _history_window(model: Colorizer, sample: SceneSample, rng: Rng,
                    min_history: int = 4):
    cfg = model.cfg
    start = _pick_window(sample, cfg.frames_per_window, rng.child("win"),
                         min_start=min_history)
    history = sample.frames.frames[:start]
    feats = model.extractor(history)
    spans = dynamic_segment(feats, cfg.theta_seg)
    summaries = model.summarizer.summarize(feats, spans)
    cache = model.fusion.build_cache(summaries, cfg.local_segments)
    return start, cache


def train_stage_dglm(model: Colorizer, dataset: list[SceneSample],
                     log: list | None = None) -> None:
    """Stage 2: train projectors + cross-attention on true-history windows."""
    if "sketchdit" not in model.stages_done:
        raise ContractViolation("stage dglm requires a completed sketchdit stage")
    cfg = model.cfg
    store = model.store
    rng = Rng(cfg.seed).child("train-dglm")
    sgd = AdamOpt(store, cfg.lr_fusion, ("fusion/",), cfg.grad_clip)
    for step in range(cfg.dglm_steps):
        r = rng.child("step", step)
        sample = dataset[int(r.integers(0, len(dataset)))]
        start, cache = _history_window(model, sample, r)
        _, bits, ref_pad, ids, z0 = _window_inputs(model, sample, start, r)
        ctrl = model._control_latent(bits, ref_pad)
        feat, _ = model.branch.hybrid_features(ctrl, ids, model.backbone)
        fused, fctx = model.fusion.fuse(feat.tokens, cache)
        t, eps, z_t = _loss_step(model, z0, r.child("noise"))
        eps_hat, bcache = model.backbone.forward(z_t, ref_pad, ids, t,
                                                 inject_feat=fused)
        diff = eps_hat - eps
        if log is not None:
            log.append(("dglm", float(np.sum(diff.astype(np.float64) ** 2))))
        w = model.schedule.x0_weight(t)
        d_inj = model.backbone.backward(bcache, (2.0 * w / diff.size) * diff)
        if d_inj is not None:
            model.fusion.fuse_backward(fctx, cache, d_inj)
        sgd.step()
        store.zero_grads()
    model.stages_done.append("dglm")


def train_stage_ccr(model: Colorizer, dataset: list[SceneSample]
                    ) -> list[tuple[int, float, float]]:
    """Stage 3: reward refinement; returns the (step, reward, baseline) curve."""
    if "dglm" not in model.stages_done:
        raise ContractViolation("stage ccr requires a completed dglm stage")
    cfg = model.cfg
    store = model.store
    reward_fn = KvFeatureReward(model.extractor, model.summarizer,
                                model.kv_maps, cfg.theta_seg)
    pg = PolicyGradient(store, RewardConfig(
        samples_per_update=cfg.ccr_samples, lr=cfg.ccr_lr,
        baseline_window=cfg.baseline_window,
        param_prefixes=TRAINABLE_REWARD_PREFIXES,
    ))
    shape = model.latent_window_shape()
    trainable = [n for n in store.params
                 if n.startswith(TRAINABLE_REWARD_PREFIXES)]

    def draw(update: int, j: int) -> RewardSample:
        r = Rng(cfg.seed).child("ccr", update, j)
        sample = dataset[int(r.integers(0, len(dataset)))]
        start, cache = _history_window(model, sample, r)
        frames, bits, ref_pad, ids, _ = _window_inputs(model, sample, start, r)
        ctrl = model._control_latent(bits, ref_pad)
        feat, bcache_branch = model.branch.hybrid_features(ctrl, ids,
                                                           model.backbone)
        fused, fctx = model.fusion.fuse(feat.tokens, cache)

        z = r.child("init").normal(shape)
        noise_rng = r.child("steps")
        transitions: list[TransitionRecord] = []
        d_feat_total = np.zeros_like(fused)
        for t in range(cfg.t_steps, 0, -1):
            eps_hat, bcache = model.backbone.forward(z, ref_pad, ids, t,
                                                     inject_feat=fused)
            mean = model.schedule.mean_from_eps(z, t, eps_hat)
            sigma = model.schedule.sigma(t)
            z_next = (mean + sigma * noise_rng.normal(shape)).astype(DTYPE)
            logp = gaussian_log_prob(z_next, mean, sigma)
            cot_mean = (z_next - mean) / (sigma * sigma)
            d_eps = model.schedule.eps_to_mean_coeff(t) * cot_mean
            d_inj = model.backbone.backward(bcache, d_eps)
            if d_inj is not None:
                d_feat_total += d_inj
            transitions.append(TransitionRecord(t, z, z_next, mean, sigma, logp))
            z = z_next
        dh = model.fusion.fuse_backward(fctx, cache, d_feat_total)
        model.branch.backward(bcache_branch, dh, model.backbone)
        score = {n: store.grads[n].copy() for n in trainable}
        store.zero_grads()
        gen = FrameSequence(model.decode(z), encoding="unit")
        ref = FrameSequence(frames, encoding="unit")
        return RewardSample(reward=reward_fn(gen, ref),
                            transitions=transitions, score=score, video=gen)

    rows = ccr_training_stage(draw, pg, cfg.ccr_updates, cfg.ccr_samples)
    model.stages_done.append("ccr")
    return rows


STAGE_ORDER = ("sketchdit", "dglm", "ccr")


def run_stage(model: Colorizer, stage: str, dataset: list[SceneSample]):
    if stage == "sketchdit":
        return train_stage_sketchdit(model, dataset)
    if stage == "dglm":
        return train_stage_dglm(model, dataset)
    if stage == "ccr":
        return train_stage_ccr(model, dataset)
    raise ValidationError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path | str, model: Colorizer) -> None:
    header = canonical_text(model.cfg)
    header += ("[state]\n"
               f"stages = {','.join(model.stages_done)}\n"
               f"config_hash = {config_hash(model.cfg)}\n")
    header_bytes = header.encode("utf-8")
    names = model.store.names()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode("utf-8")
            blob = write_blob(model.store.params[name])
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_checkpoint(path: Path | str) -> Colorizer:
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        version, = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        hlen, = struct.unpack("<I", fh.read(4))
        header = fh.read(hlen).decode("utf-8")
        if "[state]" not in header:
            raise FormatError(f"{path}: checkpoint header lacks a state section")
        cfg_text, state_text = header.split("[state]", 1)
        cfg = parse_config_text(cfg_text)
        stages: list[str] = []
        stated_hash = ""
        for line in state_text.splitlines():
            line = line.strip()
            if line.startswith("stages =") :
                value = line.split("=", 1)[1].strip()
                stages = [s for s in value.split(",") if s]
            elif line.startswith("config_hash ="):
                stated_hash = line.split("=", 1)[1].strip()
        if stated_hash and stated_hash != config_hash(cfg):
            raise FormatError(f"{path}: config hash mismatch in header")
        n_blobs, = struct.unpack("<I", fh.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_blobs):
            nlen, = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            blen, = struct.unpack("<Q", fh.read(8))
            params[name] = read_blob(fh.read(blen))
    model = Colorizer(cfg)
    model.store.load_state_dict(params)
    model.stages_done = stages
    return model
