"""Control branch: fuses reference image, sketches and text into per-layer
hybrid features that get added onto the even layers of the base stack.

The branch reuses the backbone's block type and text embeddings, is
initialized from the backbone's first L blocks, and runs once per segment
(its output does not depend on the denoising step). Training freezes the
backbone; only ``sketchdit/`` parameters move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .layers import DitBlock, Linear, ParamStore, sinusoid
from .tensor_core import DTYPE, Rng
from .toy_backbone import LatentCodec, ToyBackbone, inject, pad_reference

__all__ = [
    "HybridFeature", "ControlBranch", "build_control_input",
    "sample_reference_frame", "inject",
]


@dataclass
class HybridFeature:
    """Visual-token features emitted by the control branch for one segment."""

    tokens: np.ndarray  # (S_vis, D)
    segment_id: int = 0


def encode_sketch_tokens(codec: LatentCodec, bits: np.ndarray) -> np.ndarray:
    """Binary sketches (T, H, W) -> latent tokens (T, C_l, H', W').

    The codec sees two planes: the raw lines and the enclosed-region fill
    derived from them, so tokens inside a closed contour carry a local
    "inside" signal instead of looking like empty background.
    """
    b = np.asarray(bits)
    if b.size and not np.isin(np.unique(b), (0, 1)).all():
        raise ValidationError("sketch input must be strictly binary")
    from .media_io import fill_enclosed
    planes = np.stack([b.astype(DTYPE), fill_enclosed(b).astype(DTYPE)],
                      axis=-1)
    return codec.encode(planes)


def build_control_input(sketch_latent: np.ndarray,
                        ref_latent_padded: np.ndarray) -> np.ndarray:
    """Channel-concat sketch tokens with the padded reference tokens."""
    if sketch_latent.shape[0] != ref_latent_padded.shape[0] or \
            sketch_latent.shape[2:] != ref_latent_padded.shape[2:]:
        raise ShapeError(
            f"sketch latent {sketch_latent.shape} and reference latent "
            f"{ref_latent_padded.shape} do not align"
        )
    return np.concatenate([sketch_latent, ref_latent_padded], axis=1)


def sample_reference_frame(video_length: int, segment_span: tuple[int, int],
                           w_ref: int, rng: Rng) -> int:
    """Pick a keyframe index from the history window before a segment.

    Uniform over ``[max(0, start - w_ref), start)``; a segment with no
    history uses its own first frame.
    """
    start, length = segment_span
    if video_length < length or start + length > video_length:
        raise ValidationError("segment span exceeds the video")
    if start <= 0:
        return 0
    lo = max(0, start - w_ref)
    return int(rng.integers(lo, start))


class ControlBranch:
    PREFIX = "sketchdit/"

    def __init__(self, store: ParamStore, cfg, rng: Rng):
        if not 1 <= cfg.l_blocks < cfg.n_blocks:
            raise ValidationError("need 1 <= l_blocks < n_blocks")
        self.cfg = cfg
        d = cfg.width
        r = rng.child("sketchdit")
        self.input_proj = Linear(store, "sketchdit/input", 2 * cfg.c_latent, d,
                                 r.child("input"))
        self.blocks = [
            DitBlock(store, f"sketchdit/block{i:02d}", d, r.child("block", i),
                     hidden_mult=cfg.ffn_mult, identity_init=True)
            for i in range(cfg.l_blocks)
        ]
        self._pos_cache: dict[tuple[int, int, int], np.ndarray] = {}
        self._text_pos = sinusoid(np.arange(cfg.text_tokens), d, base=40.0)

    def init_from_backbone(self, store: ParamStore) -> None:
        """Copy the backbone's input projection and first L blocks."""
        store.copy_subtree("backbone/input.", "sketchdit/input.")
        for i in range(self.cfg.l_blocks):
            store.copy_subtree(f"backbone/block{i:02d}.", f"sketchdit/block{i:02d}.")

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

    def hybrid_features(self, control_latent: np.ndarray,
                        text_tokens: np.ndarray,
                        backbone: ToyBackbone,
                        segment_id: int = 0,
                        trace: dict | None = None):
        """Run the branch; return the final block's visual-token features.

        ``text_tokens`` are raw ids; embeddings are shared with the backbone.
        Returns ``(HybridFeature, cache)`` where the cache drives backward.
        """
        cfg = self.cfg
        f, c2, hp, wp = control_latent.shape
        if c2 != 2 * cfg.c_latent:
            raise ShapeError(
                f"control latent channels {c2} != 2 * c_latent {cfg.c_latent}")
        s_t = cfg.text_tokens
        vis_flat = np.ascontiguousarray(
            control_latent.transpose(0, 2, 3, 1)).reshape(-1, c2)
        vis_tok, c_in = self.input_proj.forward(vis_flat)
        vis_tok = vis_tok + self._vis_pos(f, hp, wp)
        text_tok, c_emb = backbone.text_emb.forward(text_tokens)
        text_tok = text_tok + self._text_pos
        x = np.concatenate([text_tok, vis_tok], axis=0)
        block_caches = []
        for block in self.blocks:
            x, bc = block.forward(x, trace=trace)
            block_caches.append(bc)
        feat = x[s_t:]
        cache = (block_caches, c_in, c_emb, s_t, x.shape)
        return HybridFeature(tokens=np.ascontiguousarray(feat),
                             segment_id=segment_id), cache

    def backward(self, cache, d_tokens: np.ndarray, backbone: ToyBackbone) -> None:
        """Accumulate branch gradients from a hybrid-feature cotangent."""
        block_caches, c_in, c_emb, s_t, full_shape = cache
        dx = np.zeros(full_shape, DTYPE)
        dx[s_t:] = d_tokens
        for block, bc in zip(reversed(self.blocks), reversed(block_caches)):
            dx, _ = block.backward(bc, dx)
        self.input_proj.backward(c_in, dx[s_t:])
        backbone.text_emb.backward(c_emb, dx[:s_t])


def control_latent_for_window(sketch_codec: LatentCodec,
                              frame_codec: LatentCodec,
                              sketch_bits: np.ndarray,
                              ref_frame: np.ndarray) -> np.ndarray:
    """Convenience: sketches + single reference frame -> branch input latent."""
    c_k = encode_sketch_tokens(sketch_codec, sketch_bits)
    ref_lat = frame_codec.encode(np.asarray(ref_frame, dtype=DTYPE)[None])
    c_i = pad_reference(ref_lat, sketch_bits.shape[0])
    return build_control_input(c_k, c_i)
