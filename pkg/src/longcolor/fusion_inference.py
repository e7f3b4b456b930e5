"""Long-sequence generation: overlapping segment schedule, early-step
half/half handoff, late-step convex blending, and history commitment.

Adjacent windows share ``C`` latent frames. While ``t >= t_start`` the
shared slots take their first half verbatim from the previous window's
step-t latents; once ``t < t_start`` slot ``k`` becomes the convex mix
``k*alpha * current + (1 - k*alpha) * previous`` with ``alpha = 1/(C+1)``,
so weights ramp toward the current window deeper into the overlap.
``t_start = 0`` disables the whole mechanism (independent windows).

At commit time the previous window's overlap copy is discarded: every
non-final window contributes its first ``F - C`` frames, the final window
the rest (trimmed to the requested total), and the history memory grows by
exactly the committed frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ValidationError
from .media_io import FrameSequence, SketchSequence
from .tensor_core import DTYPE, Rng
from .toy_backbone import ancestral_sample


@dataclass
class SegmentPlan:
    total: int
    frames: int      # F, frames per window
    overlap: int     # C, shared frames between adjacent windows
    t_start: int     # blending gate; 0 disables overlap handling entirely
    starts: list[int] = field(default_factory=list)

    @property
    def alpha(self) -> float:
        return 1.0 / (self.overlap + 1)

    def __len__(self) -> int:
        return len(self.starts)


def plan_segments(total: int, frames: int, overlap: int,
                  t_start: int) -> SegmentPlan:
    """Minimal covering schedule of windows advancing by F - C."""
    if not 0 < overlap < frames:
        raise ValidationError("need 0 < overlap < frames")
    if total < frames:
        raise ValidationError(f"total frames {total} below window size {frames}")
    if t_start < 0:
        raise ValidationError("t_start must be >= 0")
    starts = [0]
    while starts[-1] + frames < total:
        starts.append(starts[-1] + (frames - overlap))
    return SegmentPlan(total=total, frames=frames, overlap=overlap,
                       t_start=t_start, starts=starts)


def blend_overlap(z_prev_t: np.ndarray, z_cur_t: np.ndarray, t: int,
                  plan: SegmentPlan) -> np.ndarray:
    """Convex late-stage mix of the shared slots; weight k*alpha on current."""
    if t >= plan.t_start:
        raise ContractViolation(
            f"blend_overlap called at t={t} >= t_start={plan.t_start}")
    c = plan.overlap
    f = plan.frames
    if z_prev_t.shape != z_cur_t.shape or z_prev_t.shape[0] != f:
        raise ValidationError("overlap latents must share the window shape")
    out = z_cur_t.copy()
    k = np.arange(1, c + 1, dtype=np.float64)
    w = (k * plan.alpha).astype(DTYPE)
    shape = (c,) + (1,) * (z_cur_t.ndim - 1)
    w = w.reshape(shape)
    out[:c] = w * z_cur_t[:c] + (1.0 - w) * z_prev_t[f - c:]
    return out


def early_concat(z_prev_t: np.ndarray, z_cur_t: np.ndarray,
                 plan: SegmentPlan) -> np.ndarray:
    """Half/half handoff: first floor(C/2) shared slots copy the previous."""
    c = plan.overlap
    f = plan.frames
    if z_prev_t.shape != z_cur_t.shape or z_prev_t.shape[0] != f:
        raise ValidationError("overlap latents must share the window shape")
    take = c // 2
    out = z_cur_t.copy()
    if take:
        out[:take] = z_prev_t[f - c: f - c + take]
    return out


@dataclass
class GenerationSession:
    """State of one long-video run: plan, commitments, history memory."""

    plan: SegmentPlan
    ref_frame: np.ndarray          # (H, W, 3) unit range, fixed for all windows
    rng: Rng
    use_memory: bool = True
    committed: list[np.ndarray] = field(default_factory=list)
    memory: object = None

    def committed_count(self) -> int:
        return len(self.committed)


def generate_long(model, session: GenerationSession, sketches: SketchSequence,
                  tag: str, noise_scale: float = 1.0,
                  collect: dict | None = None) -> FrameSequence:
    """Generate ``plan.total`` frames window by window into the session.

    Window 1 injects the control features directly; later windows fuse them
    with the history memory first (when enabled). The previous window's full
    denoising trajectory backs the overlap handling.
    """
    plan = session.plan
    rng = session.rng
    use_memory = session.use_memory
    f = plan.frames
    needed = plan.starts[-1] + f
    if len(sketches) < needed:
        raise ValidationError(
            f"sketch shortfall: plan needs {needed} frames, got {len(sketches)}")
    if use_memory and session.memory is None:
        session.memory = model.new_memory()
    ref_pad = model.encode_ref(session.ref_frame, f)
    text_ids = model.text_ids(tag)
    shape = model.latent_window_shape(f)
    last = len(plan.starts) - 1
    prev_traj: dict[int, np.ndarray] | None = None
    for i, start in enumerate(plan.starts):
        window_bits = sketches.bits[start:start + f]
        hybrid = model.hybrid(window_bits, ref_pad, text_ids, segment_id=i)
        if use_memory and i > 0:
            hybrid = model.fuse_hybrid(hybrid, session.memory)
        pre_step = None
        if i > 0 and plan.t_start >= 1:
            traj_prev = prev_traj

            def pre_step(z, t, _traj=traj_prev):
                if t >= plan.t_start:
                    return early_concat(_traj[t], z, plan)
                return blend_overlap(_traj[t], z, t, plan)

        traj: dict[int, np.ndarray] = {}
        z0, _ = ancestral_sample(
            lambda z, t: model.predict(z, t, ref_pad, text_ids, hybrid),
            model.schedule, shape, rng.child("segment", i),
            noise_scale=noise_scale, pre_step=pre_step, trajectory=traj,
        )
        prev_traj = traj
        if collect is not None:
            collect[i] = traj
        frames = model.decode(z0)
        if i < last:
            fresh = frames[: f - plan.overlap]
        else:
            remaining = plan.total - len(session.committed)
            fresh = frames[:remaining]
        session.committed.extend(np.ascontiguousarray(fr) for fr in fresh)
        if use_memory and len(fresh):
            session.memory.extend(np.stack(fresh))
    out = np.stack(session.committed)
    return FrameSequence(np.clip(out, 0.0, 1.0), encoding="unit")


def seam_discontinuity(frames: np.ndarray, plan: SegmentPlan) -> float:
    """Mean absolute pixel jump across committed window boundaries."""
    f = np.asarray(frames, dtype=np.float64)
    seams = [s for s in plan.starts[1:] if 0 < s < len(f)]
    if not seams:
        raise ValidationError("plan has no interior window boundary")
    return float(np.mean([np.mean(np.abs(f[s] - f[s - 1])) for s in seams]))
