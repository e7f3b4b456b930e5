"""Dynamic global-local memory over generated history.

History frames are embedded (mean-pooled random patch projection, unit
norm), tiled into change-driven segments of 2/4/8 frames, and compressed
by a frozen stacked recurrence into one state per segment. Middle layers
of that stack feed fixed key/value maps; the resulting rows are the
per-layer cache. Trainable per-layer projectors align rows with the
hybrid-feature width, and a stack of residual cross-attention layers pulls
cache content into the hybrid features.

The recurrence, its KV maps, and the frame embedder are seeded-random and
never trained: they stand in for a frozen pretrained video-understanding
model. Only the ``fusion/`` parameters (projectors + attention weights)
learn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, ShapeError, ValidationError
from .layers import CrossAttention, FeedForward, ParamStore
from .tensor_core import DTYPE, Rng, write_blob, read_blob

_WINDOWS = (8, 4, 2)


class FrameFeatureExtractor:
    """Per-frame embedding: mean-pooled random patch projection, unit norm."""

    def __init__(self, patch: int, d_feature: int, rng: Rng,
                 channels: int = 3, normalize: bool = True):
        self.patch = patch
        self.channels = channels
        self.normalize = normalize
        d_patch = patch * patch * channels
        self.proj = rng.child("framefeat").normal(
            (d_feature, d_patch), scale=1.0 / np.sqrt(d_patch))

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        f = np.asarray(frames, dtype=DTYPE)
        if f.ndim != 4 or f.shape[-1] != self.channels:
            raise ShapeError(f"expected (T, H, W, {self.channels}), got {f.shape}")
        t, h, w, c = f.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"resolution {h}x{w} not divisible by patch {p}")
        x = f.reshape(t, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        x = np.ascontiguousarray(x).reshape(t, -1, p * p * c)
        emb = (x @ self.proj.T).mean(axis=1)
        if self.normalize:
            norms = np.linalg.norm(emb, axis=1, keepdims=True)
            emb = emb / np.maximum(norms, 1e-12)
        return emb.astype(DTYPE)


def cosine_changes(features: np.ndarray) -> np.ndarray:
    """Cosine distance between consecutive feature rows."""
    f = np.asarray(features, dtype=np.float64)
    if len(f) < 2:
        return np.zeros(0)
    a, b = f[:-1], f[1:]
    na = np.maximum(np.linalg.norm(a, axis=1), 1e-12)
    nb = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
    return 1.0 - np.sum(a * b, axis=1) / (na * nb)


def _window_quiet(changes: np.ndarray, start: int, width: int,
                  theta: float) -> bool:
    return bool(np.all(changes[start:start + width - 1] < theta))


def dynamic_segment(features: np.ndarray, theta: float) -> list[tuple[int, int]]:
    """Greedy left-to-right 8/4/2 tiling driven by adjacent feature change.

    A window is taken when every adjacent change inside it stays below
    ``theta``; a uniformly quiet trailing remainder shorter than 8 stays a
    single span, otherwise width 2 is the unconditional fallback.
    """
    n = len(features)
    if n < 1:
        raise ValidationError("dynamic_segment needs at least one frame")
    changes = cosine_changes(features)
    spans: list[tuple[int, int]] = []
    c = 0
    while c < n:
        rem = n - c
        if rem >= 8 and _window_quiet(changes, c, 8, theta):
            spans.append((c, 8))
            c += 8
            continue
        if rem < 8 and (rem == 1 or _window_quiet(changes, c, rem, theta)):
            spans.append((c, rem))
            break
        if rem >= 4 and _window_quiet(changes, c, 4, theta):
            spans.append((c, 4))
            c += 4
            continue
        take = min(rem, 2)
        spans.append((c, take))
        c += take
    return spans


@dataclass
class SegmentSummary:
    start: int
    length: int
    layer_states: np.ndarray  # (depth, d_summary)

    @property
    def state(self) -> np.ndarray:
        return self.layer_states[-1]


class Summarizer:
    """Stacked recurrence: one state per segment per layer, causal in g.

    Layer 1 consumes the segment's mean frame feature; deeper layers consume
    the layer below. ``activation='identity'`` yields the linear variant used
    by shift-invariance checks.
    """

    PREFIX = "lvu/"

    def __init__(self, store: ParamStore, depth: int, d_feature: int,
                 d_summary: int, rng: Rng, activation: str = "tanh"):
        if depth < 1:
            raise ValidationError("summarizer depth must be >= 1")
        if activation not in ("tanh", "identity"):
            raise ValidationError(f"unknown activation {activation!r}")
        self.depth = depth
        self.d_summary = d_summary
        self.activation = activation
        r = rng.child("lvu")
        self.a_names, self.b_names = [], []
        for layer in range(depth):
            d_in = d_feature if layer == 0 else d_summary
            a = r.child("a", layer).normal((d_summary, d_summary),
                                           scale=0.7 / np.sqrt(d_summary))
            b = r.child("b", layer).normal((d_summary, d_in),
                                           scale=1.0 / np.sqrt(d_in))
            self.a_names.append(store.add(f"lvu/rec{layer:02d}.a", a))
            self.b_names.append(store.add(f"lvu/rec{layer:02d}.b", b))
        self.store = store

    def _act(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x) if self.activation == "tanh" else x

    def initial_state(self) -> np.ndarray:
        return np.zeros((self.depth, self.d_summary), DTYPE)

    def step(self, prev_states: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Advance every layer by one segment."""
        states = np.empty_like(prev_states)
        x = u
        for layer in range(self.depth):
            a = self.a_names[layer]
            b = self.b_names[layer]
            x = self._act(a @ prev_states[layer] + b @ x).astype(DTYPE)
            states[layer] = x
        return states

    def summarize(self, features: np.ndarray, spans: list[tuple[int, int]],
                  init_states: np.ndarray | None = None,
                  start_offset: int = 0) -> list[SegmentSummary]:
        """Compress segment mean features into causal per-segment states."""
        total = sum(length for _, length in spans)
        if spans and (spans[0][0] != 0 or total != len(features)):
            raise ValidationError("spans must tile the given features")
        for (s0, l0), (s1, _) in zip(spans, spans[1:]):
            if s0 + l0 != s1:
                raise ValidationError("spans must be contiguous")
        states = self.initial_state() if init_states is None else init_states
        out = []
        for start, length in spans:
            u = np.asarray(features[start:start + length],
                           dtype=DTYPE).mean(axis=0)
            states = self.step(states, u)
            out.append(SegmentSummary(start + start_offset, length, states))
        return out


class KvMaps:
    """Fixed per-cache-layer key/value maps over summarizer layer states."""

    def __init__(self, store: ParamStore, memory_layers: tuple[int, ...],
                 depth: int, d_summary: int, d_kv: int, rng: Rng):
        for m in memory_layers:
            if not 1 <= m <= depth:
                raise ValidationError("memory layer index outside summarizer depth")
        self.memory_layers = tuple(memory_layers)
        r = rng.child("kvmaps")
        self.k_maps, self.v_maps = [], []
        for i, layer in enumerate(self.memory_layers):
            k = r.child("k", i).normal((d_kv, d_summary),
                                       scale=1.0 / np.sqrt(d_summary))
            v = r.child("v", i).normal((d_kv, d_summary),
                                       scale=1.0 / np.sqrt(d_summary))
            self.k_maps.append(store.add(f"lvu/kv{i:02d}.k", k))
            self.v_maps.append(store.add(f"lvu/kv{i:02d}.v", v))

    @property
    def n_layers(self) -> int:
        return len(self.memory_layers)

    def raw_rows(self, summaries: list[SegmentSummary]):
        """Per cache layer: (keys, values) with one row per segment."""
        out = []
        for i, layer in enumerate(self.memory_layers):
            s = np.stack([sm.layer_states[layer - 1] for sm in summaries])
            out.append((s @ self.k_maps[i].T, s @ self.v_maps[i].T))
        return out


@dataclass
class CacheLayer:
    k_raw_global: np.ndarray
    v_raw_global: np.ndarray
    k_raw_local: np.ndarray
    v_raw_local: np.ndarray
    k_global: np.ndarray
    v_global: np.ndarray
    k_local: np.ndarray
    v_local: np.ndarray

    def rows_k(self) -> np.ndarray:
        return np.concatenate([self.k_global, self.k_local], axis=0)

    def rows_v(self) -> np.ndarray:
        return np.concatenate([self.v_global, self.v_local], axis=0)


@dataclass
class MemoryCache:
    layers: list[CacheLayer]
    spans: list[tuple[int, int]]
    local_count: int
    build_ctx: object = field(default=None, repr=False)

    @property
    def n_global(self) -> int:
        return self.layers[0].k_global.shape[0]

    def dump(self, dirpath: Path | str) -> None:
        """Debug dump: one blob per layer tensor plus a manifest."""
        d = Path(dirpath)
        d.mkdir(parents=True, exist_ok=True)
        names = ("k_raw_global", "v_raw_global", "k_raw_local", "v_raw_local",
                 "k_global", "v_global", "k_local", "v_local")
        lines = [f"layers = {len(self.layers)}",
                 f"local_count = {self.local_count}",
                 "spans = " + ";".join(f"{s},{l}" for s, l in self.spans)]
        for m, layer in enumerate(self.layers):
            for n in names:
                arr = getattr(layer, n)
                fname = f"layer{m:02d}_{n}.lanm"
                with open(d / fname, "wb") as fh:
                    fh.write(write_blob(arr))
                lines.append(f"{fname} = {arr.shape[0]} rows x {arr.shape[1]}")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def load_rows(dirpath: Path | str, layer: int, name: str) -> np.ndarray:
        with open(Path(dirpath) / f"layer{layer:02d}_{name}.lanm", "rb") as fh:
            return read_blob(fh.read())


class FusionStack:
    """Trainable projectors + residual cross-attention over the cache."""

    PREFIX = "fusion/"

    def __init__(self, store: ParamStore, n_layers: int, d_kv: int,
                 width: int, rng: Rng, kv_maps: KvMaps | None = None):
        self.n_layers = n_layers
        self.width = width
        self.kv_maps = kv_maps
        r = rng.child("fusion")
        self.projectors = [
            FeedForward(store, f"fusion/proj{m:02d}", d_kv, 2 * width,
                        r.child("proj", m), d_out=width)
            for m in range(n_layers)
        ]
        self.attn = [
            CrossAttention(store, f"fusion/attn{m:02d}", width,
                           r.child("attn", m), zero_values=True)
            for m in range(n_layers)
        ]

    def build_cache(self, summaries: list[SegmentSummary],
                    local_count: int) -> MemoryCache:
        """Raw + projected KV rows per layer; locals are the trailing spans."""
        if not summaries:
            raise ValidationError("build_cache needs at least one summary")
        if self.kv_maps is None:
            raise ValidationError("this fusion stack has no KV maps attached")
        local = min(max(local_count, 1), len(summaries))
        layers = []
        ctx = []
        for m, (k_raw, v_raw) in enumerate(self.kv_maps.raw_rows(summaries)):
            k_proj, ck = self.projectors[m].forward(k_raw)
            v_proj, cv = self.projectors[m].forward(v_raw)
            layers.append(CacheLayer(
                k_raw_global=k_raw, v_raw_global=v_raw,
                k_raw_local=k_raw[-local:].copy(),
                v_raw_local=v_raw[-local:].copy(),
                k_global=k_proj, v_global=v_proj,
                k_local=k_proj[-local:].copy(),
                v_local=v_proj[-local:].copy(),
            ))
            ctx.append((ck, cv))
        spans = [(s.start, s.length) for s in summaries]
        return MemoryCache(layers=layers, spans=spans, local_count=local,
                           build_ctx=ctx)

    def fuse(self, h: np.ndarray, cache: MemoryCache,
             trace: dict | None = None):
        """Sequential residual cross-attention, global rows first then local."""
        if len(cache.layers) != self.n_layers:
            raise ContractViolation(
                f"cache has {len(cache.layers)} layers, stack expects "
                f"{self.n_layers}"
            )
        caches = []
        for m, layer in enumerate(cache.layers):
            out, c = self.attn[m].forward(h, layer.rows_k(), layer.rows_v(),
                                          trace=trace)
            caches.append((c, h))
            h = h + out
        return h, caches

    def fuse_backward(self, fuse_ctx, cache: MemoryCache,
                      dh: np.ndarray) -> np.ndarray:
        """Backward through fuse and the projectors; stops at raw rows."""
        g = cache.n_global
        for m in reversed(range(self.n_layers)):
            c, _h_in = fuse_ctx[m]
            dh_attn, drows_k, drows_v = self.attn[m].backward(c, dh)
            dh = dh + dh_attn
            dk = drows_k[:g].copy()
            dv = drows_v[:g].copy()
            local = drows_k.shape[0] - g
            if local:
                dk[-local:] += drows_k[g:]
                dv[-local:] += drows_v[g:]
            ck, cv = cache.build_ctx[m]
            self.projectors[m].backward(ck, dk)
            self.projectors[m].backward(cv, dv)
        return dh


class MemoryState:
    """Session-owned growing history: features in, cache-ready summaries out.

    Greedy span decisions become final once a full 8-frame lookahead was
    available; the provisional tail is re-derived on every extension, which
    keeps grown state bit-identical to a batch rebuild. Features of
    finalized segments are dropped, mirroring the offload behaviour of the
    model this stands in for.
    """

    def __init__(self, extractor: FrameFeatureExtractor,
                 summarizer: Summarizer, theta: float):
        self.extractor = extractor
        self.summarizer = summarizer
        self.theta = theta
        self.frame_count = 0
        self._committed: list[SegmentSummary] = []
        self._committed_state: np.ndarray = summarizer.initial_state()
        self._tail_feats: np.ndarray = np.zeros((0, 0), DTYPE)
        self._tail_start = 0

    def extend(self, frames: np.ndarray) -> None:
        """Append decoded frames (T, H, W, 3) to the history."""
        feats = self.extractor(frames)
        if self._tail_feats.size == 0:
            self._tail_feats = feats
        else:
            self._tail_feats = np.concatenate([self._tail_feats, feats])
        self.frame_count += len(frames)
        spans = dynamic_segment(self._tail_feats, self.theta)
        n = len(self._tail_feats)
        keep = 0
        for start, length in spans:
            if n - start < 8:  # decided without full lookahead: provisional
                break
            keep += 1
        if keep:
            final = spans[:keep]
            summaries = self.summarizer.summarize(
                self._tail_feats[: final[-1][0] + final[-1][1]], final,
                init_states=self._committed_state,
                start_offset=self._tail_start,
            )
            self._committed.extend(summaries)
            self._committed_state = summaries[-1].layer_states
            cut = final[-1][0] + final[-1][1]
            self._tail_start += cut
            self._tail_feats = self._tail_feats[cut:].copy()

    def summaries(self) -> list[SegmentSummary]:
        out = list(self._committed)
        if len(self._tail_feats):
            spans = dynamic_segment(self._tail_feats, self.theta)
            out.extend(self.summarizer.summarize(
                self._tail_feats, spans,
                init_states=self._committed_state,
                start_offset=self._tail_start,
            ))
        return out
