"""Toy video denoiser: patch codec, noise schedule, block stack, sampler.

The codec is an invertible linear patchifier standing in for a video VAE:
non-overlapping ``p x p`` spatial patches, temporal stride 1, orthonormal
rows whose first channels span per-channel constant patches so flat colors
survive compression exactly. The denoiser is a stack of pre-norm blocks
with joint attention over text tokens and (time x space) patch tokens;
control features can be added on the visual slice of even blocks, scaled
by a gate weight. Training and the reward stage backpropagate by hand
through these pieces; there is no autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractViolation, ShapeError, ValidationError
from .layers import DitBlock, Embedding, LayerNorm, Linear, ParamStore, sinusoid
from .media_io import PALETTE, PATHS, SHAPES, FrameSequence
from .tensor_core import DTYPE, Rng

VOCAB: tuple[str, ...] = ("<pad>", "<unk>") + tuple(PALETTE) + SHAPES + PATHS
_VOCAB_IDS = {w: i for i, w in enumerate(VOCAB)}


def tokenize(tag: str, n_tokens: int) -> np.ndarray:
    """Map a scene tag to a fixed-length id sequence (pad id 0, unk id 1)."""
    ids = [_VOCAB_IDS.get(w, 1) for w in tag.split()[:n_tokens]]
    ids += [0] * (n_tokens - len(ids))
    return np.array(ids, dtype=np.int64)


class LatentCodec:
    """Linear patch codec: frames (T, H, W, C) <-> latents (T, C_l, H', W').

    ``latent_scale`` shrinks encoder outputs (and is undone on decode) so
    latent magnitudes sit near unit scale for the denoiser.
    """

    def __init__(self, patch: int, c_latent: int, rng: Rng, channels: int = 3,
                 init: str = "orthogonal", latent_scale: float = 1.0):
        self.patch = patch
        self.c_latent = c_latent
        self.channels = channels
        if latent_scale <= 0:
            raise ValidationError("latent_scale must be positive")
        self.latent_scale = float(latent_scale)
        d_patch = patch * patch * channels
        if c_latent > d_patch:
            raise ShapeError(f"c_latent {c_latent} exceeds patch dim {d_patch}")
        if init == "identity":
            if c_latent != d_patch:
                raise ShapeError("identity codec needs c_latent == patch dim")
            enc = np.eye(d_patch, dtype=np.float64)
        elif init == "orthogonal":
            # first `channels` basis vectors: constant per-channel patches,
            # so flat colors lie in the row space and decode exactly
            m = np.asarray(
                rng.child("codec").normal((d_patch, d_patch)), dtype=np.float64
            )
            for c in range(channels):
                basis = np.zeros(d_patch)
                basis[c::channels] = 1.0 / np.sqrt(patch * patch)
                m[:, c] = basis
            q, r = np.linalg.qr(m)
            q = q * np.sign(np.diag(r))[None, :]
            enc = q[:, :c_latent].T
        else:
            raise ValidationError(f"unknown codec init {init!r}")
        self.enc = (self.latent_scale * enc).astype(DTYPE)
        self.dec = (np.linalg.pinv(enc) / self.latent_scale).astype(DTYPE)

    def latent_hw(self, h: int, w: int) -> tuple[int, int]:
        if h % self.patch or w % self.patch:
            raise ShapeError(f"resolution {h}x{w} not divisible by patch {self.patch}")
        return h // self.patch, w // self.patch

    def _to_patches(self, frames: np.ndarray) -> np.ndarray:
        t, h, w, c = frames.shape
        hp, wp = self.latent_hw(h, w)
        p = self.patch
        x = frames.reshape(t, hp, p, wp, p, c).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x).reshape(t, hp, wp, p * p * c)

    def _from_patches(self, patches: np.ndarray, h: int, w: int) -> np.ndarray:
        t, hp, wp, _ = patches.shape
        p = self.patch
        x = patches.reshape(t, hp, wp, p, p, self.channels)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x).reshape(t, h, w, self.channels)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """Unit-range frames (T, H, W, C) -> latent (T, C_l, H', W')."""
        f = np.asarray(frames, dtype=DTYPE)
        if f.ndim != 4 or f.shape[-1] != self.channels:
            raise ShapeError(f"expected (T, H, W, {self.channels}), got {f.shape}")
        centered = 2.0 * f - 1.0
        lat = self._to_patches(centered) @ self.enc.T
        return np.ascontiguousarray(lat.transpose(0, 3, 1, 2))

    def decode(self, latent: np.ndarray, clip: bool = True) -> np.ndarray:
        """Latent (T, C_l, H', W') -> unit-range frames (T, H, W, C)."""
        if latent.ndim != 4 or latent.shape[1] != self.c_latent:
            raise ShapeError(f"expected (T, {self.c_latent}, H', W'), got {latent.shape}")
        lat = latent.transpose(0, 2, 3, 1)
        patches = lat @ self.dec.T
        h = latent.shape[2] * self.patch
        w = latent.shape[3] * self.patch
        frames = (self._from_patches(patches, h, w) + 1.0) / 2.0
        if clip:
            frames = np.clip(frames, 0.0, 1.0)
        return frames.astype(DTYPE)


class DenoiseSchedule:
    """Linear-beta diffusion schedule with 1-based timesteps t in [1, T]."""

    def __init__(self, t_steps: int = 50, beta_start: float = 0.002,
                 beta_end: float = 0.2):
        if t_steps < 1:
            raise ValidationError("t_steps must be >= 1")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValidationError("need 0 < beta_start <= beta_end < 1")
        self.t_steps = t_steps
        betas = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
        self.beta = np.concatenate([[0.0], betas])            # index by t
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        levels = np.sqrt(1.0 - self.alpha_bar)
        if not np.all(np.diff(levels[1:]) > 0.0):
            raise ValidationError("noise level must increase strictly with t")

    def noise_level(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def q_sample(self, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        a = self.alpha_bar[t]
        return (np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps).astype(DTYPE)

    def mean_from_eps(self, z_t: np.ndarray, t: int, eps_hat: np.ndarray) -> np.ndarray:
        coeff = self.beta[t] / np.sqrt(1.0 - self.alpha_bar[t])
        return ((z_t - coeff * eps_hat) / np.sqrt(self.alpha[t])).astype(DTYPE)

    def eps_to_mean_coeff(self, t: int) -> float:
        """d mean / d eps_hat, a scalar for this parameterization."""
        return float(-self.beta[t] / (np.sqrt(1.0 - self.alpha_bar[t])
                                      * np.sqrt(self.alpha[t])))

    def x0_weight(self, t: int) -> float:
        """Per-step factor turning the eps-MSE gradient into the unit-scale
        clean-latent regression gradient (SNR reweighting)."""
        return float((1.0 - self.alpha_bar[t]) / self.alpha_bar[t])

    def sigma(self, t: int) -> float:
        return float(np.sqrt(self.beta[t]))

    def drift_only(self, z_init: np.ndarray) -> np.ndarray:
        """Closed-form endpoint for a zero noise-prediction, zero-noise walk."""
        scale = float(np.prod(1.0 / np.sqrt(self.alpha[1:])))
        return (z_init * scale).astype(DTYPE)


def gaussian_log_prob(x: np.ndarray, mean: np.ndarray, sigma: float) -> float:
    d = (x.astype(np.float64) - mean.astype(np.float64)).ravel()
    n = d.size
    return float(-0.5 * np.dot(d, d) / sigma**2
                 - 0.5 * n * np.log(2.0 * np.pi * sigma**2))


@dataclass
class TransitionRecord:
    t: int
    z_t: np.ndarray
    z_prev: np.ndarray
    mean: np.ndarray
    sigma: float
    log_prob: float


def ancestral_sample(
    predict: Callable[[np.ndarray, int], np.ndarray],
    schedule: DenoiseSchedule,
    shape: tuple[int, ...],
    rng: Rng,
    noise_scale: float = 1.0,
    record_transitions: bool = False,
    pre_step: Callable[[np.ndarray, int], np.ndarray] | None = None,
    trajectory: dict[int, np.ndarray] | None = None,
) -> tuple[np.ndarray, list[TransitionRecord]]:
    """Iterate t = T..1 with Gaussian transitions around the predicted mean.

    ``pre_step`` may rewrite the working latent at the top of each step
    (overlap handling); ``trajectory`` captures the post-rewrite latent per
    step for the next segment to blend against.
    """
    if record_transitions and noise_scale <= 0.0:
        raise ContractViolation("transition records need noise_scale > 0")
    z = rng.child("init").normal(shape)
    noise_rng = rng.child("steps")
    records: list[TransitionRecord] = []
    for t in range(schedule.t_steps, 0, -1):
        if pre_step is not None:
            z = pre_step(z, t)
        if trajectory is not None:
            trajectory[t] = z.copy()
        eps_hat = predict(z, t)
        if eps_hat.shape != z.shape:
            raise ShapeError("noise prediction shape differs from latent shape")
        mean = schedule.mean_from_eps(z, t, eps_hat)
        sigma = noise_scale * schedule.sigma(t)
        z_next = (mean + sigma * noise_rng.normal(shape)).astype(DTYPE)
        if record_transitions:
            records.append(TransitionRecord(
                t=t, z_t=z, z_prev=z_next, mean=mean, sigma=sigma,
                log_prob=gaussian_log_prob(z_next, mean, sigma),
            ))
        z = z_next
    return z, records


def pad_reference(ref_latent_1: np.ndarray, frames: int) -> np.ndarray:
    """Zero-pad a single-frame reference latent across the window's time axis."""
    if ref_latent_1.shape[0] != 1:
        raise ShapeError("reference latent must have a single time slot")
    out = np.zeros((frames,) + ref_latent_1.shape[1:], DTYPE)
    out[0] = ref_latent_1[0]
    return out


def inject(z_n: np.ndarray, h: np.ndarray, n: int, gamma: float,
           vis_start: int = 0) -> np.ndarray:
    """Add gated control features to the visual-token slice of layer n.

    Only even layers are valid injection sites. Zero gate or all-zero
    features return the activation bit-identically.
    """
    if n % 2 != 0:
        raise ContractViolation(f"injection at odd layer {n}")
    if h.shape != z_n[vis_start:].shape:
        raise ShapeError(
            f"feature shape {h.shape} does not match visual slice "
            f"{z_n[vis_start:].shape}"
        )
    if gamma == 0.0 or not h.any():
        return z_n
    out = z_n.copy()
    out[vis_start:] += gamma * h
    return out


class ToyBackbone:
    """Block-stack denoiser over text + video patch tokens.

    Internally the stack regresses the clean latent and the noise estimate
    is derived through the schedule (eps = (z_t - sqrt(a)*x0) / sqrt(1-a)),
    which keeps the regression target at unit scale for every timestep;
    the module's output contract stays the predicted noise.
    """

    PREFIX = "backbone/"

    def __init__(self, store: ParamStore, cfg, rng: Rng,
                 schedule: "DenoiseSchedule | None" = None):
        if cfg.n_blocks % 2 != 0:
            raise ValidationError("n_blocks must be even")
        if cfg.temporal_factor != 1:
            raise ValidationError("only temporal_factor == 1 is supported")
        self.cfg = cfg
        self.schedule = schedule if schedule is not None else DenoiseSchedule(
            cfg.t_steps, cfg.beta_start, cfg.beta_end)
        d = cfg.width
        r = rng.child("backbone")
        self.input_proj = Linear(store, "backbone/input", 2 * cfg.c_latent, d,
                                 r.child("input"))
        self.text_emb = Embedding(store, "backbone/text", len(VOCAB), d,
                                  r.child("text"))
        self.blocks = [
            DitBlock(store, f"backbone/block{i:02d}", d, r.child("block", i),
                     hidden_mult=cfg.ffn_mult, identity_init=True)
            for i in range(cfg.n_blocks)
        ]
        self.final_ln = LayerNorm(store, "backbone/ln_f", d)
        # the head predicts the clean latent as a correction on top of the
        # time-broadcast reference latent and sees the local reference patch;
        # zero init starts the stack at the copy-the-reference solution
        self.head = Linear(store, "backbone/head", d + cfg.c_latent,
                           cfg.c_latent, r.child("head"), zero_init=True)
        # per-step gate between the rescaled noisy latent and the stack's
        # conditional estimate, initialized at the Gaussian posterior blend
        # for a unit-ish latent prior
        prior_var = 0.35
        ab = self.schedule.alpha_bar[: cfg.t_steps + 1]
        gate0 = (ab * prior_var) / (ab * prior_var + (1.0 - ab) + 1e-12)
        self.zgate_name = "backbone/zgate.w"
        store.add(self.zgate_name, gate0.astype(DTYPE))
        self.store = store
        self._pos_cache: dict[tuple[int, int, int], np.ndarray] = {}
        self._text_pos = sinusoid(np.arange(cfg.text_tokens), d, base=40.0)
        self._t_table = sinusoid(np.arange(cfg.t_steps + 1), d, base=500.0)

    def _vis_pos(self, f: int, hp: int, wp: int) -> np.ndarray:
        key = (f, hp, wp)
        if key not in self._pos_cache:
            d = self.cfg.width
            pt = sinusoid(np.arange(f), d, base=10000.0)
            ph = sinusoid(np.arange(hp), d, base=3000.0)
            pw = sinusoid(np.arange(wp), d, base=900.0)
            pos = (pt[:, None, None, :] + ph[None, :, None, :]
                   + pw[None, None, :, :])
            self._pos_cache[key] = pos.reshape(f * hp * wp, d).astype(DTYPE)
        return self._pos_cache[key]

    def forward(self, z_t: np.ndarray, ref_latent: np.ndarray,
                text_ids: np.ndarray, t: int,
                inject_feat: np.ndarray | None = None,
                trace: dict | None = None):
        cfg = self.cfg
        if z_t.shape != ref_latent.shape:
            raise ShapeError("latent and padded reference shapes must match")
        f, c, hp, wp = z_t.shape
        if c != cfg.c_latent:
            raise ShapeError(f"latent channels {c} != configured {cfg.c_latent}")
        if not 1 <= t <= cfg.t_steps:
            raise ContractViolation(f"timestep {t} outside [1, {cfg.t_steps}]")
        if len(text_ids) != cfg.text_tokens:
            raise ShapeError("text id count differs from configured text_tokens")
        s_t = cfg.text_tokens

        stacked = np.concatenate([z_t, ref_latent], axis=1)     # (F, 2C, H', W')
        vis_flat = np.ascontiguousarray(
            stacked.transpose(0, 2, 3, 1)).reshape(-1, 2 * c)
        vis_tok, c_in = self.input_proj.forward(vis_flat)
        vis_tok = vis_tok + self._vis_pos(f, hp, wp) + self._t_table[t]

        text_tok, c_emb = self.text_emb.forward(text_ids)
        text_tok = text_tok + self._text_pos + self._t_table[t]

        x = np.concatenate([text_tok, vis_tok], axis=0)
        block_caches = []
        for i, block in enumerate(self.blocks):
            n = i + 1
            feat = inject_feat if (n % 2 == 0) else None
            x, bc = block.forward(x, inject=feat, gamma=cfg.gamma,
                                  vis_start=s_t, trace=trace)
            block_caches.append(bc)
        x_f, c_lnf = self.final_ln.forward(x)
        ref_bcast = np.broadcast_to(ref_latent[0:1], z_t.shape)
        ref_vec = np.ascontiguousarray(
            ref_bcast.transpose(0, 2, 3, 1)).reshape(-1, c)
        head_in = np.concatenate([x_f[s_t:], ref_vec], axis=1)
        x0_flat, c_head = self.head.forward(head_in)
        cond_est = np.ascontiguousarray(
            x0_flat.reshape(f, hp, wp, c).transpose(0, 3, 1, 2)) + ref_bcast
        a_bar = self.schedule.alpha_bar[t]
        gate = float(self.store.params[self.zgate_name][t])
        z_scaled = (z_t / np.sqrt(a_bar)).astype(DTYPE)
        x0_hat = (gate * z_scaled + (1.0 - gate) * cond_est).astype(DTYPE)
        x0_coeff = float(-np.sqrt(a_bar) / np.sqrt(1.0 - a_bar))
        eps = (z_t / np.sqrt(1.0 - a_bar) + x0_coeff * x0_hat).astype(DTYPE)
        cache = (block_caches, c_lnf, c_head, c_in, c_emb, (f, c, hp, wp),
                 s_t, x0_coeff, gate, t, z_scaled, cond_est)
        return eps, cache

    def backward(self, cache, d_eps: np.ndarray) -> np.ndarray | None:
        """Accumulate parameter grads; return the summed injection cotangent."""
        (block_caches, c_lnf, c_head, c_in, c_emb, (f, c, hp, wp),
         s_t, d_eps_d_x0, gate, t, z_scaled, cond_est) = cache
        d_x0 = (d_eps * d_eps_d_x0).astype(DTYPE)
        self.store.grads[self.zgate_name][t] += float(
            np.sum(d_x0.astype(np.float64) * (z_scaled - cond_est)))
        d_cond = ((1.0 - gate) * d_x0).astype(DTYPE)
        d_flat = np.ascontiguousarray(
            d_cond.transpose(0, 2, 3, 1)).reshape(-1, c)
        d_head_in = self.head.backward(c_head, d_flat)
        dx_f = np.zeros((s_t + f * hp * wp, self.cfg.width), DTYPE)
        dx_f[s_t:] = d_head_in[:, : self.cfg.width]
        dx = self.final_ln.backward(c_lnf, dx_f)
        d_inject = None
        for block, bc in zip(reversed(self.blocks), reversed(block_caches)):
            dx, dinj = block.backward(bc, dx)
            if dinj is not None:
                d_inject = dinj if d_inject is None else d_inject + dinj
        self.input_proj.backward(c_in, dx[s_t:])
        self.text_emb.backward(c_emb, dx[:s_t])
        return d_inject


def diffusion_loss(
    predict: Callable[[np.ndarray, int], np.ndarray],
    schedule: DenoiseSchedule,
    z0: np.ndarray,
    rng: Rng,
):
    """Squared-norm noise-prediction error at one uniformly drawn step.

    Returns ``(loss, loss_cotangent_context)`` where the context carries
    everything a training step needs to start the backward pass.
    """
    t = int(rng.integers(1, schedule.t_steps + 1))
    eps = rng.normal(z0.shape)
    z_t = schedule.q_sample(z0, t, eps)
    eps_hat = predict(z_t, t)
    diff = (eps_hat - eps).astype(DTYPE)
    loss = float(np.sum(diff.astype(np.float64) ** 2))
    return loss, (t, z_t, eps, diff)


def encode_window(codec: LatentCodec, frames: FrameSequence) -> np.ndarray:
    return codec.encode(frames.to_unit().frames)


def decode_window(codec: LatentCodec, latent: np.ndarray,
                  fps: float = 8.0) -> FrameSequence:
    return FrameSequence(codec.decode(latent), fps=fps, encoding="unit")
