"""Frame and sketch I/O plus the synthetic animation scene generator.

Pixel data lives in two declared encodings: ``"unit"`` (float32 in [0, 1])
and ``"u8"`` (integers in [0, 255]). Frame directories hold one binary PPM
(P6) file per frame named ``frame_%05d.ppm``; the round trip is lossless
for 8-bit data. Sketches are strictly binary maps where 1 marks a line
pixel; on disk they are re-encoded as grayscale with lines dark
(bit b -> 255 * (1 - b)) so the threshold rule recovers them exactly.

The scene generator replaces a real animation corpus at desk scale: flat
shaded shapes with constant colors move along splines over a light
background, which gives ground-truth color constancy and analytically
known object masks for the consistency metrics.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IngestionError, ValidationError
from .tensor_core import Rng

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (200, 40, 40),
    "green": (40, 170, 60),
    "blue": (50, 80, 200),
    "yellow": (220, 200, 40),
    "purple": (150, 60, 180),
    "orange": (230, 140, 30),
    "cyan": (40, 190, 190),
    "magenta": (200, 50, 160),
}

SHAPES = ("square", "circle", "triangle")
PATHS = ("static", "drift", "orbit", "bounce")

_FRAME_RE = re.compile(r"^frame_(\d{5})\.ppm$")


@dataclass
class FrameSequence:
    """A stack of same-sized RGB frames with a declared pixel encoding."""

    frames: np.ndarray  # (T, H, W, 3)
    fps: float = 8.0
    encoding: str = "unit"

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValidationError(f"frames must be (T, H, W, 3), got {f.shape}")
        if self.encoding == "unit":
            f = f.astype(np.float32)
            if f.size and (f.min() < 0.0 or f.max() > 1.0):
                raise ValidationError("unit-encoded frames must lie in [0, 1]")
        elif self.encoding == "u8":
            if f.size and (f.min() < 0 or f.max() > 255):
                raise ValidationError("u8-encoded frames must lie in [0, 255]")
            f = f.astype(np.uint8)
        else:
            raise ValidationError(f"unknown encoding {self.encoding!r}")
        self.frames = f

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def to_unit(self) -> "FrameSequence":
        if self.encoding == "unit":
            return self
        return FrameSequence(self.frames.astype(np.float32) / 255.0, self.fps, "unit")

    def to_u8(self) -> "FrameSequence":
        if self.encoding == "u8":
            return self
        return FrameSequence(
            np.round(self.frames * 255.0).astype(np.uint8), self.fps, "u8"
        )


@dataclass
class SketchSequence:
    """Binary line maps, one per frame; 1 = line pixel."""

    bits: np.ndarray  # (T, H, W), values in {0, 1}

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 3:
            raise ValidationError(f"sketches must be (T, H, W), got {b.shape}")
        if b.size and not np.isin(np.unique(b), (0, 1)).all():
            raise ValidationError("sketches must be strictly binary")
        self.bits = b.astype(np.uint8)

    def __len__(self) -> int:
        return self.bits.shape[0]


def binarize_sketch(gray: np.ndarray) -> np.ndarray:
    """Threshold a grayscale sketch: values above 200 become 0, others 1."""
    g = np.asarray(gray)
    if g.size and (g.min() < 0 or g.max() > 255):
        raise ValidationError("grayscale sketch values must lie in [0, 255]")
    return np.where(g > 200, 0, 1).astype(np.uint8)


def sketch_to_gray(bits: np.ndarray) -> np.ndarray:
    """Re-encode binary lines as grayscale with lines dark: b -> 255*(1-b)."""
    b = np.asarray(bits)
    return (255 * (1 - b.astype(np.int32))).astype(np.uint8)


def fill_enclosed(bits: np.ndarray) -> np.ndarray:
    """Mark pixels enclosed by sketch lines (lines count as enclosed).

    Background is whatever non-line area is 4-connected to the border;
    everything else is inside some closed contour. Works per frame on
    (H, W) or (T, H, W) binary maps.
    """
    b = np.asarray(bits)
    if b.ndim == 3:
        return np.stack([fill_enclosed(fr) for fr in b])
    lines = b.astype(bool)
    outside = np.zeros_like(lines)
    outside[0, :] |= ~lines[0, :]
    outside[-1, :] |= ~lines[-1, :]
    outside[:, 0] |= ~lines[:, 0]
    outside[:, -1] |= ~lines[:, -1]
    while True:
        grown = outside.copy()
        grown[1:, :] |= outside[:-1, :]
        grown[:-1, :] |= outside[1:, :]
        grown[:, 1:] |= outside[:, :-1]
        grown[:, :-1] |= outside[:, 1:]
        grown &= ~lines
        if np.array_equal(grown, outside):
            break
        outside = grown
    return (~outside).astype(np.uint8)


def extract_sketch(frame: np.ndarray) -> np.ndarray:
    """Edge-extract an RGB frame into a grayscale sketch with edges dark.

    Gradient magnitude of the luma image is scaled by 2 (a full-contrast
    step saturates to black) and inverted, so flat regions map to 255 and
    :func:`binarize_sketch` marks edges as 1.
    """
    f = np.asarray(frame, dtype=np.float32)
    if f.ndim != 3 or f.shape[-1] != 3:
        raise ValidationError(f"expected an (H, W, 3) frame, got {f.shape}")
    if f.size and f.max() > 1.0:
        f = f / 255.0
    luma = 255.0 * (0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2])
    gy, gx = np.gradient(luma)
    mag = np.hypot(gx, gy)
    out = 255.0 - np.minimum(2.0 * mag, 255.0)
    return np.round(out).astype(np.uint8)


# ---------------------------------------------------------------------------
# PPM (P6) files and frame directories
# ---------------------------------------------------------------------------


def write_ppm(path: Path | str, frame_u8: np.ndarray) -> None:
    f = np.asarray(frame_u8)
    if f.ndim != 3 or f.shape[-1] != 3 or f.dtype != np.uint8:
        raise ValidationError("write_ppm expects an (H, W, 3) uint8 frame")
    h, w = f.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(f.tobytes(order="C"))


def _read_token(fh) -> bytes:
    # skip whitespace and '#' comments between header tokens
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            raise FormatError("truncated PPM header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = fh.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_ppm(path: Path | str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise FormatError(f"{path}: not a P6 PPM (magic {magic!r})")
        w = int(_read_token(fh))
        h = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise FormatError(f"{path}: unsupported maxval {maxval}")
        raw = fh.read(3 * w * h)
        if len(raw) != 3 * w * h:
            raise FormatError(f"{path}: truncated pixel payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def write_frame_dir(dirpath: Path | str, seq: FrameSequence) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    u8 = seq.to_u8()
    for i in range(len(u8)):
        write_ppm(d / f"frame_{i:05d}.ppm", u8.frames[i])


def read_frame_dir(dirpath: Path | str, fps: float = 8.0) -> FrameSequence:
    d = Path(dirpath)
    if not d.is_dir():
        raise IngestionError(f"{d}: not a directory")
    indices = {}
    for p in d.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indices[int(m.group(1))] = p
    if not indices:
        raise IngestionError(f"{d}: no frame_%05d.ppm files found")
    count = max(indices) + 1
    missing = sorted(set(range(count)) - set(indices))
    if missing:
        raise IngestionError(f"{d}: missing frame index {missing[0]}")
    frames = np.stack([read_ppm(indices[i]) for i in range(count)])
    return FrameSequence(frames, fps=fps, encoding="u8")


def write_sketch_dir(dirpath: Path | str, sketches: SketchSequence) -> None:
    gray = sketch_to_gray(sketches.bits)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    write_frame_dir(dirpath, FrameSequence(rgb, encoding="u8"))


def read_sketch_dir(dirpath: Path | str) -> SketchSequence:
    seq = read_frame_dir(dirpath)
    gray = seq.frames[..., 0]
    return SketchSequence(binarize_sketch(gray))


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class ObjectSpec:
    shape: str
    color: tuple[int, int, int]
    path: str
    size_frac: float = 0.28  # shape diameter as a fraction of resolution
    scale: str = "constant"  # or "grow"
    band: tuple[float, float] = (0.0, 1.0)  # vertical band confining the path
    appear_frame: int = 0    # object absent before this frame


@dataclass
class SyntheticScene:
    objects: list[ObjectSpec]
    frames: int
    size: int
    seed: int
    background: tuple[int, int, int] = (245, 243, 238)
    fps: float = 8.0

    def __post_init__(self):
        if self.frames < 1:
            raise ValidationError("scene needs at least one frame")
        if self.size < 8:
            raise ValidationError("scene resolution must be >= 8")
        if not self.objects:
            raise ValidationError("scene needs at least one object")
        for ob in self.objects:
            if ob.shape not in SHAPES:
                raise ValidationError(f"unknown shape {ob.shape!r}")
            if ob.path not in PATHS:
                raise ValidationError(f"unknown path {ob.path!r}")
            if not all(0 <= c <= 255 for c in ob.color):
                raise ValidationError("object color channels must lie in [0, 255]")
            if not 0.05 <= ob.size_frac <= 0.6:
                raise ValidationError("object size_frac must lie in [0.05, 0.6]")


def _catmull_rom(points: np.ndarray, u: float) -> np.ndarray:
    """Evaluate a centripetal-free Catmull-Rom spline through `points` at u."""
    k = len(points)
    if k == 1:
        return points[0]
    x = u * (k - 1)
    i = min(int(x), k - 2)
    s = x - i
    p0 = points[max(i - 1, 0)]
    p1 = points[i]
    p2 = points[i + 1]
    p3 = points[min(i + 2, k - 1)]
    m1 = (p2 - p0) / 2.0
    m2 = (p3 - p1) / 2.0
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * p1 + h10 * m1 + h01 * p2 + h11 * m2


def _waypoints(ob: ObjectSpec, size: int, rng: Rng) -> np.ndarray:
    """Deterministic spline waypoints keeping the shape inside the frame."""
    margin = 0.6 * ob.size_frac * size + 1.0
    lo_y = ob.band[0] * size + margin
    hi_y = ob.band[1] * size - margin
    lo_x, hi_x = margin, size - margin
    if hi_y <= lo_y:  # band too thin: pin to its center
        lo_y = hi_y = (ob.band[0] + ob.band[1]) / 2.0 * size
    u = rng.child("waypoints", ob.shape, ob.path)

    def rx():
        return float(u.uniform((), lo_x, hi_x))

    def ry():
        return float(u.uniform((), lo_y, hi_y))

    if ob.path == "static":
        return np.array([[rx(), ry()]])
    if ob.path == "drift":
        y1, y2 = ry(), ry()
        return np.array([[lo_x, y1], [size / 2.0, (y1 + y2) / 2.0], [hi_x, y2]])
    if ob.path == "orbit":
        cx, cy = size / 2.0, (lo_y + hi_y) / 2.0
        r = min(hi_x - cx, (hi_y - lo_y) / 2.0)
        ang0 = float(u.uniform((), 0, 2 * np.pi))
        angles = ang0 + np.linspace(0, 2 * np.pi, 9)
        return np.stack([cx + r * np.cos(angles), cy + r * np.sin(angles)], axis=1)
    # bounce: zig-zag across the band
    xs = np.linspace(lo_x, hi_x, 5)
    ys = [lo_y, hi_y, lo_y, hi_y, lo_y]
    return np.stack([xs, ys], axis=1)


def object_position(scene: SyntheticScene, obj_idx: int, frame_idx: int) -> np.ndarray:
    """Continuous (x, y) center of one object at one frame."""
    ob = scene.objects[obj_idx]
    rng = Rng(scene.seed).child("object", obj_idx)
    pts = _waypoints(ob, scene.size, rng)
    u = 0.0 if scene.frames == 1 else frame_idx / (scene.frames - 1)
    return _catmull_rom(pts, float(u))


def _object_radius(scene: SyntheticScene, obj_idx: int, frame_idx: int) -> float:
    ob = scene.objects[obj_idx]
    base = ob.size_frac * scene.size / 2.0
    if ob.scale == "grow" and scene.frames > 1:
        base *= 0.75 + 0.5 * frame_idx / (scene.frames - 1)
    return base


def object_mask(scene: SyntheticScene, obj_idx: int, frame_idx: int) -> np.ndarray:
    """Boolean (H, W) mask of one object's pixels at one frame."""
    ob = scene.objects[obj_idx]
    if frame_idx < ob.appear_frame:
        return np.zeros((scene.size, scene.size), dtype=bool)
    cx, cy = object_position(scene, obj_idx, frame_idx)
    r = _object_radius(scene, obj_idx, frame_idx)
    yy, xx = np.meshgrid(
        np.arange(scene.size) + 0.5, np.arange(scene.size) + 0.5, indexing="ij"
    )
    if ob.shape == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if ob.shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    # triangle: upright isoceles inscribed in the radius
    top = yy >= cy - r
    bottom = yy <= cy + r
    half_w = (yy - (cy - r)) / 2.0
    return top & bottom & (np.abs(xx - cx) <= half_w)


def scene_tag(scene: SyntheticScene) -> str:
    words = []
    for ob in scene.objects:
        words += [color_name(ob.color), ob.shape, ob.path]
    return " ".join(words)


def color_name(rgb: tuple[int, int, int]) -> str:
    arr = np.array(rgb, dtype=np.float64)
    names = list(PALETTE)
    dists = [np.sum((arr - np.array(PALETTE[n])) ** 2) for n in names]
    return names[int(np.argmin(dists))]


def generate_scene(
    scene: SyntheticScene,
) -> tuple[FrameSequence, SketchSequence, str]:
    """Render a scene to frames, extracted+binarized sketches, and a text tag."""
    size = scene.size
    bg = np.array(scene.background, dtype=np.uint8)
    frames = np.empty((scene.frames, size, size, 3), dtype=np.uint8)
    for f in range(scene.frames):
        img = np.tile(bg, (size, size, 1))
        for k in range(len(scene.objects)):
            mask = object_mask(scene, k, f)
            img[mask] = np.array(scene.objects[k].color, dtype=np.uint8)
        frames[f] = img
    seq = FrameSequence(frames, fps=scene.fps, encoding="u8").to_unit()
    bits = np.stack([binarize_sketch(extract_sketch(fr)) for fr in seq.frames])
    return seq, SketchSequence(bits), scene_tag(scene)


# ---------------------------------------------------------------------------
# Scene spec text format (keys: shape, color, path, frames, size, seed, ...)
# ---------------------------------------------------------------------------

_SCENE_KEYS = {
    "shape", "color", "path", "frames", "size", "seed",
    "shape2", "color2", "path2", "objsize", "scale", "fps", "background",
}


def _parse_color(text: str) -> tuple[int, int, int]:
    text = text.strip()
    if text in PALETTE:
        return PALETTE[text]
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValidationError(f"color must be a palette name or r,g,b: {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def parse_scene_spec(text: str) -> SyntheticScene:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"scene spec line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SCENE_KEYS:
            raise ValidationError(f"scene spec line {lineno}: unknown key {key!r}")
        kv[key] = val
    for req in ("shape", "color", "frames", "size", "seed"):
        if req not in kv:
            raise ValidationError(f"scene spec missing required key {req!r}")
    two = "shape2" in kv
    objects = [
        ObjectSpec(
            shape=kv["shape"],
            color=_parse_color(kv["color"]),
            path=kv.get("path", "drift"),
            size_frac=float(kv.get("objsize", 0.28)),
            scale=kv.get("scale", "constant"),
            band=(0.0, 0.5) if two else (0.0, 1.0),
        )
    ]
    if two:
        objects.append(
            ObjectSpec(
                shape=kv["shape2"],
                color=_parse_color(kv.get("color2", "blue")),
                path=kv.get("path2", "drift"),
                size_frac=float(kv.get("objsize", 0.28)),
                band=(0.5, 1.0),
            )
        )
    scene = SyntheticScene(
        objects=objects,
        frames=int(kv["frames"]),
        size=int(kv["size"]),
        seed=int(kv["seed"]),
        fps=float(kv.get("fps", 8.0)),
    )
    if "background" in kv:
        scene.background = _parse_color(kv["background"])
    return scene


def format_scene_spec(scene: SyntheticScene) -> str:
    ob = scene.objects[0]
    lines = [
        f"shape = {ob.shape}",
        f"color = {ob.color[0]},{ob.color[1]},{ob.color[2]}",
        f"path = {ob.path}",
        f"frames = {scene.frames}",
        f"size = {scene.size}",
        f"seed = {scene.seed}",
        f"objsize = {ob.size_frac}",
        f"fps = {scene.fps}",
    ]
    if len(scene.objects) > 1:
        o2 = scene.objects[1]
        lines += [
            f"shape2 = {o2.shape}",
            f"color2 = {o2.color[0]},{o2.color[1]},{o2.color[2]}",
            f"path2 = {o2.path}",
        ]
    return "\n".join(lines) + "\n"
