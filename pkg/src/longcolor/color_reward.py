"""Color-consistency reward and its score-function optimizer.

The reward is the negated distance between per-layer key/value rows of the
generated and reference videos, computed through the frozen history
compressor (higher is better, zero at equality). Optimization never
differentiates the reward or the decode path: each sample carries the
summed gradient of its Gaussian transition log-densities with respect to
the trainable parameters, and the update is the baseline-centered
REINFORCE average of those scores.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dglm_memory import (FrameFeatureExtractor, KvMaps, Summarizer,
                          dynamic_segment)
from .errors import ValidationError
from .layers import ParamStore
from .media_io import FrameSequence
from .tensor_core import DTYPE, Rng
from .toy_backbone import TransitionRecord


class KvFeatureReward:
    """Negated per-layer KV distance between two videos, zero at equality.

    Both videos are summarized under both videos' own segmentations and the
    two distances averaged, which keeps the reward symmetric even when the
    dynamic tilings differ.
    """

    def __init__(self, extractor: FrameFeatureExtractor, summarizer: Summarizer,
                 kv_maps: KvMaps, theta: float):
        self.extractor = extractor
        self.summarizer = summarizer
        self.kv_maps = kv_maps
        self.theta = theta

    def _distance(self, feats_a: np.ndarray, feats_b: np.ndarray,
                  spans: list[tuple[int, int]]) -> float:
        rows_a = self.kv_maps.raw_rows(self.summarizer.summarize(feats_a, spans))
        rows_b = self.kv_maps.raw_rows(self.summarizer.summarize(feats_b, spans))
        total = 0.0
        for (ka, va), (kb, vb) in zip(rows_a, rows_b):
            dk = (ka - kb).astype(np.float64)
            dv = (va - vb).astype(np.float64)
            total += float(np.sum(dk * dk) + np.sum(dv * dv))
        return total

    def __call__(self, gen: FrameSequence, ref: FrameSequence) -> float:
        if len(gen) == 0 or len(ref) == 0:
            raise ValidationError("reward needs non-empty videos")
        if len(gen) != len(ref):
            raise ValidationError("reward compares equal-length videos")
        fg = self.extractor(gen.to_unit().frames)
        fr = self.extractor(ref.to_unit().frames)
        spans_g = dynamic_segment(fg, self.theta)
        spans_r = dynamic_segment(fr, self.theta)
        d = 0.5 * (self._distance(fg, fr, spans_r)
                   + self._distance(fg, fr, spans_g))
        return -d


@dataclass
class RewardSample:
    """One sampled video with everything the estimator needs."""

    reward: float
    transitions: list[TransitionRecord]
    score: dict[str, np.ndarray]  # sum_t d log p_t / d theta, per parameter
    video: FrameSequence | None = None


@dataclass
class RewardConfig:
    samples_per_update: int = 8
    lr: float = 1e-6
    baseline_window: int = 64
    param_prefixes: tuple[str, ...] = ("sketchdit/", "fusion/")

    def __post_init__(self):
        if self.samples_per_update < 1:
            raise ValidationError("samples_per_update must be >= 1")


def _validate_samples(samples: list[RewardSample]) -> None:
    if not samples:
        raise ValidationError("update needs at least one sample")
    n = None
    for s in samples:
        if not s.transitions:
            raise ValidationError("sample is missing its transition records")
        if n is None:
            n = len(s.transitions)
        elif len(s.transitions) != n:
            raise ValidationError("samples carry differing transition counts")
        if not all(np.isfinite(t.log_prob) for t in s.transitions):
            raise ValidationError("non-finite transition log-probability")


class PolicyGradient:
    """Baseline-centered REINFORCE ascent over a parameter subset.

    The moving-average baseline uses only rewards from previous updates, so
    centering does not bias the estimator.
    """

    def __init__(self, store: ParamStore, cfg: RewardConfig):
        self.store = store
        self.cfg = cfg
        self._history: deque[float] = deque(maxlen=cfg.baseline_window)

    @property
    def baseline(self) -> float:
        return float(np.mean(self._history)) if self._history else 0.0

    def update(self, samples: list[RewardSample],
               baseline: float | None = None) -> dict[str, np.ndarray]:
        """Apply one SGD ascent step; returns the applied parameter delta."""
        _validate_samples(samples)
        b = self.baseline if baseline is None else baseline
        names = sorted({n for s in samples for n in s.score})
        delta: dict[str, np.ndarray] = {}
        for name in names:
            acc = np.zeros_like(self.store.params[name], dtype=np.float64)
            for s in samples:
                if name in s.score:
                    acc += (s.reward - b) * s.score[name].astype(np.float64)
            delta[name] = (self.cfg.lr * acc / len(samples)).astype(DTYPE)
        if self.cfg.lr != 0.0:
            for name, d in delta.items():
                self.store.params[name] += d
        for s in samples:
            self._history.append(s.reward)
        return delta


def policy_gradient_update(store: ParamStore, samples: list[RewardSample],
                           cfg: RewardConfig,
                           baseline: float | None = None) -> dict[str, np.ndarray]:
    """One-shot form of :meth:`PolicyGradient.update` (fresh baseline state)."""
    return PolicyGradient(store, cfg).update(samples, baseline=baseline)


def ccr_training_stage(
    draw_sample: Callable[[int, int], RewardSample],
    pg: PolicyGradient,
    n_updates: int,
    samples_per_update: int,
) -> list[tuple[int, float, float]]:
    """Run reward refinement; returns (step, mean_reward, baseline) rows.

    ``draw_sample(update_idx, sample_idx)`` must produce a fresh rollout;
    the callable owns model conditioning and seeding.
    """
    rows = []
    for step in range(n_updates):
        samples = [draw_sample(step, j) for j in range(samples_per_update)]
        baseline_used = pg.baseline
        pg.update(samples)
        mean_r = float(np.mean([s.reward for s in samples]))
        rows.append((step, mean_r, baseline_used))
    return rows


def reward_curve_csv(rows: list[tuple[int, float, float]]) -> str:
    lines = ["step,reward,baseline"]
    lines += [f"{s},{r:.10g},{b:.10g}" for s, r, b in rows]
    return "\n".join(lines) + "\n"


@dataclass
class GaussianChain:
    """1-D linear-Gaussian sampling chain for estimator validation.

    Transitions t = T..1: ``z_{t-1} = a_t * z_t + theta + sigma * eps_t``
    with ``z_T ~ N(0, 1)``; the score of theta is available in closed form,
    and common-random-number finite differences give an independent oracle
    for the gradient of any expected reward.
    """

    a: tuple[float, ...] = (0.9, 0.9)
    sigma: float = 0.5
    theta: float = 0.0

    @property
    def t_steps(self) -> int:
        return len(self.a)

    def draw_noises(self, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        z_init = rng.normal(n).astype(np.float64)
        eps = rng.normal((self.t_steps, n)).astype(np.float64)
        return z_init, eps

    def rollout(self, z_init: np.ndarray, eps: np.ndarray,
                theta: float | None = None):
        """Deterministic rollout given noises; returns (z0, score)."""
        th = self.theta if theta is None else theta
        z = z_init
        score = np.zeros_like(z)
        for i, t in enumerate(range(self.t_steps, 0, -1)):
            mu = self.a[t - 1] * z + th
            z = mu + self.sigma * eps[i]
            score += (z - mu) / self.sigma**2  # d mu / d theta == 1
        return z, score

    def samples(self, n: int, rng: Rng,
                reward_fn: Callable[[np.ndarray], np.ndarray]
                ) -> tuple[np.ndarray, np.ndarray]:
        """(rewards, scores) for n independent rollouts."""
        z_init, eps = self.draw_noises(n, rng)
        z0, score = self.rollout(z_init, eps)
        return reward_fn(z0), score

    def fd_gradient(self, n: int, rng: Rng,
                    reward_fn: Callable[[np.ndarray], np.ndarray],
                    bump: float = 1e-4) -> float:
        """Central finite difference of E[r] in theta, common random numbers."""
        z_init, eps = self.draw_noises(n, rng)
        z_hi, _ = self.rollout(z_init, eps, self.theta + bump)
        z_lo, _ = self.rollout(z_init, eps, self.theta - bump)
        return float((np.mean(reward_fn(z_hi)) - np.mean(reward_fn(z_lo)))
                     / (2.0 * bump))
