"""Minimal dense numeric engine used by every other module.

Tensors are float32 numpy arrays in row-major (C) order; `dims` is the
numpy shape and `data` the flat row-major payload. All public operations
validate shapes, never broadcast beyond leading batch dimensions, and
guarantee finite outputs. Randomness goes through :class:`Rng`, a thin
seeded PCG64 wrapper whose streams are reproducible for a given seed.

The module also owns the single-tensor blob format used by checkpoints
and cache dumps: magic ``LANM``, u32 LE version, u8 dtype code (0 = f32),
u8 ndim, u64 LE extents, then the raw little-endian f32 payload.
"""

from __future__ import annotations

import struct
import zlib
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ShapeError

DTYPE = np.float32

BLOB_MAGIC = b"LANM"
BLOB_VERSION = 1
BLOB_DTYPE_F32 = 0


def as_tensor(values, dims: Sequence[int] | None = None) -> np.ndarray:
    """Build a float32, C-contiguous tensor from nested lists or an array."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if dims is not None:
        if int(np.prod(dims)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as dims {tuple(dims)}")
        arr = arr.reshape(tuple(dims))
    return arr


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise ShapeError(f"{what} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product, batched over leading dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    if a.ndim != b.ndim and not (a.ndim == 2 or b.ndim == 2):
        raise ShapeError("batched matmul requires equal leading dims")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dims disagree: {a.shape} x {b.shape}")
    out = np.matmul(a, b).astype(DTYPE, copy=False)
    return ensure_finite(out, "matmul output")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction) along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {x.ndim}")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted, dtype=DTYPE)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return ensure_finite(out, "softmax output")


def dft2(frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unitary 2-D DFT of a real frame; returns (real, imag) float32 pair."""
    if frame.ndim != 2:
        raise ShapeError(f"dft2 expects a 2-D frame, got ndim {frame.ndim}")
    spec = np.fft.fft2(frame.astype(np.float64), norm="ortho")
    return spec.real.astype(DTYPE), spec.imag.astype(DTYPE)


def idft2(real: np.ndarray, imag: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2`; returns the real part as float32."""
    if real.shape != imag.shape or real.ndim != 2:
        raise ShapeError("idft2 expects matching 2-D real/imag parts")
    spec = real.astype(np.float64) + 1j * imag.astype(np.float64)
    out = np.fft.ifft2(spec, norm="ortho").real
    return out.astype(DTYPE)


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    out = (x - mu) / np.sqrt(var + eps) * gain + bias
    return ensure_finite(out.astype(DTYPE, copy=False), "layer_norm output")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return ensure_finite((a + b).astype(DTYPE, copy=False), "add output")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return ensure_finite((a * b).astype(DTYPE, copy=False), "mul output")


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x).astype(DTYPE, copy=False)


def concat(parts: Iterable[np.ndarray], axis: int) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    ndim = parts[0].ndim
    ax = axis if axis >= 0 else axis + ndim
    for p in parts[1:]:
        if p.ndim != ndim:
            raise ShapeError("concat rank mismatch")
        for d in range(ndim):
            if d != ax and p.shape[d] != parts[0].shape[d]:
                raise ShapeError(
                    f"concat non-axis dim {d} mismatch: {p.shape} vs {parts[0].shape}"
                )
    return np.concatenate(parts, axis=ax).astype(DTYPE, copy=False)


def pad(x: np.ndarray, pad_widths: Sequence[tuple[int, int]]) -> np.ndarray:
    """Zero-pad; one (before, after) pair per axis."""
    if len(pad_widths) != x.ndim:
        raise ShapeError("pad needs one (before, after) pair per axis")
    return np.pad(x, pad_widths, mode="constant").astype(DTYPE, copy=False)


def slice_axis(x: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(idx)])


class Rng:
    """Seeded random stream with deterministic, label-addressed children.

    The same 64-bit seed reproduces the same stream; `child("a", 3)` derives
    an independent stream addressed by its labels, so unrelated consumers
    never share or perturb each other's draws.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key))
        )

    def child(self, *labels) -> "Rng":
        key = self._key + tuple(
            zlib.crc32(str(lab).encode("utf-8")) & 0xFFFFFFFF for lab in labels
        )
        return Rng(self.seed, key)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(DTYPE)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(DTYPE)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def orthogonal(self, rows: int, cols: int) -> np.ndarray:
        """Matrix with orthonormal rows (rows <= cols) via QR."""
        if rows > cols:
            raise ShapeError("orthogonal init needs rows <= cols")
        m = self._gen.standard_normal((cols, max(rows, 1)))
        q, r = np.linalg.qr(m)
        q = q * np.sign(np.diag(r))[None, :]
        return np.ascontiguousarray(q.T[:rows], dtype=DTYPE)


def write_blob(arr: np.ndarray) -> bytes:
    """Serialize one float32 tensor into the LANM blob format."""
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    head = BLOB_MAGIC + struct.pack("<IBB", BLOB_VERSION, BLOB_DTYPE_F32, arr.ndim)
    dims = b"".join(struct.pack("<Q", d) for d in arr.shape)
    payload = arr.astype("<f4", copy=False).tobytes(order="C")
    return head + dims + payload


def read_blob(buf: bytes) -> np.ndarray:
    """Parse one LANM blob back into a float32 tensor."""
    if len(buf) < 10 or buf[:4] != BLOB_MAGIC:
        raise FormatError("not a LANM blob (bad magic)")
    version, dtype_code, ndim = struct.unpack("<IBB", buf[4:10])
    if version != BLOB_VERSION:
        raise FormatError(f"unsupported blob version {version}")
    if dtype_code != BLOB_DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype_code}")
    off = 10
    if len(buf) < off + 8 * ndim:
        raise FormatError("truncated blob header")
    dims = tuple(
        struct.unpack("<Q", buf[off + 8 * i : off + 8 * (i + 1)])[0]
        for i in range(ndim)
    )
    off += 8 * ndim
    count = int(np.prod(dims)) if dims else 1
    expected = off + 4 * count
    if len(buf) != expected:
        raise FormatError(f"blob payload length {len(buf) - off}, expected {4 * count}")
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return np.ascontiguousarray(flat.astype(DTYPE).reshape(dims))
