"""Quantitative evaluation: PSNR, windowed SSIM, frequency-split PSNR via
radial Fourier masks, and prefix-mean decay ratios.

All metrics run on frames resized to a common square resolution and
normalized to [0, 1], applied identically to generated and reference
frames. The frequency split masks the unitary 2-D spectrum of the
*difference* image: bins with radial frequency at most ``rho`` times
Nyquist form the low band, the complement the high band, so band MSEs add
up to the total MSE exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .media_io import FrameSequence
from .tensor_core import dft2, idft2

DEFAULT_CAP_DB = 100.0
SSIM_WINDOW = 8
_C1 = (0.01) ** 2  # stabilizers for unit-range data
_C2 = (0.03) ** 2


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")


def _mse_to_db(mse: float, cap_db: float) -> float:
    if mse <= 0.0:
        return cap_db
    return float(min(cap_db, 10.0 * np.log10(1.0 / mse)))


def psnr(a: np.ndarray, b: np.ndarray, cap_db: float = DEFAULT_CAP_DB) -> float:
    """10*log10(1/MSE) for unit-range frames, capped for identical inputs."""
    _check_pair(a, b)
    d = a.astype(np.float64) - b.astype(np.float64)
    return _mse_to_db(float(np.mean(d * d)), cap_db)


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    """Sum of every w x w window (valid positions) via an integral image."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over sliding windows (population stats)."""
    _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"frame smaller than the {window}x{window} window")
    n = float(window * window)
    scores = []
    for c in range(a.shape[2]):
        x = a[..., c].astype(np.float64)
        y = b[..., c].astype(np.float64)
        mu_x = _window_sums(x, window) / n
        mu_y = _window_sums(y, window) / n
        xx = _window_sums(x * x, window) / n
        yy = _window_sums(y * y, window) / n
        xy = _window_sums(x * y, window) / n
        var_x = xx - mu_x * mu_x
        var_y = yy - mu_y * mu_y
        cov = xy - mu_x * mu_y
        s = ((2 * mu_x * mu_y + _C1) * (2 * cov + _C2)) / (
            (mu_x**2 + mu_y**2 + _C1) * (var_x + var_y + _C2))
        scores.append(float(np.mean(s)))
    return float(np.mean(scores))


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize to (size, size)."""
    x = np.asarray(img, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    h, w = x.shape[:2]
    if (h, w) == (size, size):
        out = x
    else:
        def grid(n_in):
            src = (np.arange(size) + 0.5) * (n_in / size) - 0.5
            src = np.clip(src, 0.0, n_in - 1.0)
            lo = np.floor(src).astype(np.int64)
            hi = np.minimum(lo + 1, n_in - 1)
            return lo, hi, (src - lo)

        ylo, yhi, fy = grid(h)
        xlo, xhi, fx = grid(w)
        top = x[ylo][:, xlo] * (1 - fx)[None, :, None] \
            + x[ylo][:, xhi] * fx[None, :, None]
        bot = x[yhi][:, xlo] * (1 - fx)[None, :, None] \
            + x[yhi][:, xhi] * fx[None, :, None]
        out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    out = out.astype(np.float32)
    return out[..., 0] if squeeze else out


def normalize_frames(seq: FrameSequence, size: int) -> np.ndarray:
    """Shared metric preprocessing: unit range then bilinear square resize."""
    unit = seq.to_unit().frames
    return np.stack([resize_bilinear(f, size) for f in unit])


def radial_masks(n: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Complementary low/high masks over the unshifted n x n spectrum."""
    if not 0.0 < rho < 1.0:
        raise ValidationError("rho must lie in (0, 1)")
    freq = np.fft.fftfreq(n)
    r = np.hypot(freq[:, None], freq[None, :])
    low = r <= rho * 0.5  # Nyquist is 0.5 cycles/sample
    return low, ~low


def frequency_split_psnr(
    gen: np.ndarray, ref: np.ndarray, rho: float,
    cap_db: float = DEFAULT_CAP_DB,
) -> tuple[list[float], list[float]]:
    """Per-frame low/high-band PSNR of preprocessed (N, S, S, 3) stacks."""
    if gen.shape != ref.shape:
        raise ShapeError(f"sequence shapes differ: {gen.shape} vs {ref.shape}")
    n = gen.shape[1]
    low_mask, high_mask = radial_masks(n, rho)
    low_series, high_series = [], []
    for g, r in zip(gen, ref):
        diff = g.astype(np.float32) - r.astype(np.float32)
        mse_low = 0.0
        mse_high = 0.0
        for c in range(diff.shape[-1]):
            re, im = dft2(diff[..., c])
            err_low = idft2(re * low_mask, im * low_mask).astype(np.float64)
            err_high = idft2(re * high_mask, im * high_mask).astype(np.float64)
            mse_low += float(np.mean(err_low**2))
            mse_high += float(np.mean(err_high**2))
        mse_low /= diff.shape[-1]
        mse_high /= diff.shape[-1]
        low_series.append(_mse_to_db(mse_low, cap_db))
        high_series.append(_mse_to_db(mse_high, cap_db))
    return low_series, high_series


def decay_ratio(series: list[float], horizons: list[int]) -> dict[int, float]:
    """Relative drop of the prefix mean at each horizon vs the first 14."""
    s = np.asarray(series, dtype=np.float64)
    if len(s) < 14:
        raise ValidationError("decay ratio needs at least 14 frames")
    m14 = float(np.mean(s[:14]))
    out = {}
    for h in horizons:
        if h > len(s):
            raise ValidationError(f"horizon {h} exceeds series length {len(s)}")
        if h < 1:
            raise ValidationError("horizons must be >= 1")
        out[h] = (m14 - float(np.mean(s[:h]))) / m14
    return out


def tracked_color_drift(frames: np.ndarray, masks: np.ndarray,
                        anchor_frames: int = 13) -> float:
    """Color-consistency drift of one tracked object over a video.

    Per frame, the object's mean RGB inside its mask; the anchor is the mean
    of those over the first ``anchor_frames``. Returns the mean L1 distance
    of per-frame colors from the anchor (0 = perfectly stable colors).
    """
    f = np.asarray(frames, dtype=np.float64)
    m = np.asarray(masks, dtype=bool)
    if f.shape[:3] != m.shape:
        raise ShapeError("frames and masks must align")
    colors = []
    for i in range(len(f)):
        if not m[i].any():
            continue
        colors.append(f[i][m[i]].mean(axis=0))
    if len(colors) < anchor_frames + 1:
        raise ValidationError("not enough masked frames for a drift estimate")
    colors = np.stack(colors)
    anchor = colors[:anchor_frames].mean(axis=0)
    return float(np.mean(np.abs(colors - anchor)))


def default_horizons(length: int) -> list[int]:
    hs = [14] + list(range(20, length + 1, 20))
    if length >= 14 and length not in hs:
        hs.append(length)
    return sorted(set(h for h in hs if h <= length))


@dataclass
class MetricReport:
    per_frame_psnr: list[float]
    per_frame_ssim: list[float]
    psnr_low: list[float]
    psnr_high: list[float]
    decay_low: dict[int, float]
    decay_high: dict[int, float]
    rho: float
    cap_db: float
    resize: int
    config_hash: str = ""
    normalization: str = "unit range, bilinear resize, masked-difference bands"

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_frame_psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.per_frame_ssim))

    def csv_text(self) -> str:
        lines = ["frame,psnr,ssim,psnr_low,psnr_high"]
        for i in range(len(self.per_frame_psnr)):
            lines.append(
                f"{i},{self.per_frame_psnr[i]:.6f},{self.per_frame_ssim[i]:.6f},"
                f"{self.psnr_low[i]:.6f},{self.psnr_high[i]:.6f}")
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [
            f"mean_psnr = {self.mean_psnr:.6f}",
            f"mean_ssim = {self.mean_ssim:.6f}",
        ]
        for h in sorted(self.decay_low):
            lines.append(f"decay_low@{h} = {self.decay_low[h]:.8f}")
        for h in sorted(self.decay_high):
            lines.append(f"decay_high@{h} = {self.decay_high[h]:.8f}")
        lines += [
            f"rho = {self.rho}",
            f"cap_db = {self.cap_db}",
            f"resize = {self.resize}",
            f"frames = {len(self.per_frame_psnr)}",
            f"normalization = {self.normalization}",
        ]
        if self.config_hash:
            lines.append(f"config_hash = {self.config_hash}")
        return "\n".join(lines) + "\n"


def build_report(gen: FrameSequence, ref: FrameSequence, rho: float,
                 cap_db: float = DEFAULT_CAP_DB, resize: int = 256,
                 horizons: list[int] | None = None,
                 config_hash: str = "") -> MetricReport:
    if len(gen) != len(ref):
        raise ValidationError(
            f"length mismatch: {len(gen)} generated vs {len(ref)} reference")
    g = normalize_frames(gen, resize)
    r = normalize_frames(ref, resize)
    per_psnr = [psnr(a, b, cap_db) for a, b in zip(g, r)]
    per_ssim = [ssim(a, b) for a, b in zip(g, r)]
    low, high = frequency_split_psnr(g, r, rho, cap_db)
    if len(g) >= 14:
        hs = horizons if horizons is not None else default_horizons(len(g))
        decay_low = decay_ratio(low, hs)
        decay_high = decay_ratio(high, hs)
    else:
        decay_low, decay_high = {}, {}
    return MetricReport(
        per_frame_psnr=per_psnr, per_frame_ssim=per_ssim,
        psnr_low=low, psnr_high=high,
        decay_low=decay_low, decay_high=decay_high,
        rho=rho, cap_db=cap_db, resize=resize, config_hash=config_hash,
    )
