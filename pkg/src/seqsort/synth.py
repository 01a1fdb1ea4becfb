"""Synthetic videos: textured objects moving over static cluttered backgrounds.

Every clip carries its exact motion script (per-frame object positions), so
flow estimates and mined tuples can be checked against ground truth.

On-disk clip layout (one directory per clip)::

    meta.txt          key=value lines (seed, geometry, motion script)
    frame_000.raw     uint8, planar 3 x H x W, row-major
    frame_001.raw     ...
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .imaging import LUMA, quantize, smooth_noise, to_u8
from .tensor import make_rng

TRAJECTORY_KINDS = ("linear", "reversing", "oscillating", "static")


class ClipFormatError(ValueError):
    """Clip directory is missing files or has malformed metadata."""


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    frames: int = 16
    fps: float = 25.0
    objects_min: int = 1
    objects_max: int = 3
    size_min: int = 10
    size_max: int = 16
    speed_min: float = 1.5
    speed_max: float = 3.0
    period_min: int = 4
    period_max: int = 8
    # relative sampling weights for trajectory kinds, in TRAJECTORY_KINDS order
    kind_weights: tuple[float, ...] = (0.7, 0.1, 0.1, 0.1)
    min_contrast: float = 0.25
    texture_sigma: float = 1.0
    texture_amplitude: float = 0.18
    background_sigma: float = 2.0
    background_amplitude: float = 0.05
    # per-frame object hue increment (color-shortcut variant); 0 disables
    hue_drift: float = 0.0
    # per-frame object brightness increment applied with hue drift
    value_drift: float = 0.0

    def validate(self) -> None:
        if self.frames < 8:
            raise SceneError(f"frames must be >= 8, got {self.frames}")
        if self.size_min < 2 or self.size_min > self.size_max:
            raise SceneError("need 2 <= size_min <= size_max")
        if min(self.height, self.width) < 2 * self.size_max:
            raise SceneError(
                f"infeasible geometry: frame {self.height}x{self.width} smaller than 2x object size {self.size_max}"
            )
        if not 1 <= self.objects_min <= self.objects_max:
            raise SceneError("need 1 <= objects_min <= objects_max")
        if self.speed_min < 0 or self.speed_min > self.speed_max:
            raise SceneError("need 0 <= speed_min <= speed_max")
        if len(self.kind_weights) != len(TRAJECTORY_KINDS) or min(self.kind_weights) < 0 or sum(self.kind_weights) <= 0:
            raise SceneError(f"kind_weights must be {len(TRAJECTORY_KINDS)} non-negative weights")
        if self.period_min < 2 or self.period_min > self.period_max:
            raise SceneError("need 2 <= period_min <= period_max")


@dataclass
class ObjectTrack:
    texture_id: int
    size: int
    kind: str
    velocity: tuple[float, float]
    color: tuple[float, float, float]
    # (T, 2) top-left (x, y) per frame
    positions: np.ndarray
    # (T, 3) per-frame base color; constant unless hue drift is on
    colors: np.ndarray

    def centroids(self) -> np.ndarray:
        return self.positions + self.size / 2.0


@dataclass
class MotionScript:
    objects: list[ObjectTrack] = field(default_factory=list)


@dataclass
class FrameSequence:
    # (T, 3, H, W) float32 in [0, 1], on the 8-bit grid
    frames: np.ndarray
    fps: float
    script: MotionScript
    seed: int = 0
    clip_id: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def moving_mask(self) -> np.ndarray:
        """Pixels ever covered by a non-static object."""
        h, w = self.shape
        mask = np.zeros((h, w), bool)
        for obj in self.script.objects:
            if obj.kind == "static":
                continue
            for x, y in obj.positions:
                x0, y0 = int(np.floor(x)), int(np.floor(y))
                mask[max(0, y0):min(h, y0 + obj.size + 1), max(0, x0):min(w, x0 + obj.size + 1)] = True
        return mask

    def static_fraction(self) -> float:
        return 1.0 - float(self.moving_mask().mean())


def _trajectory(kind, size, speed, cfg, rng):
    t = np.arange(cfg.frames, dtype=np.float64)
    lim = np.array([cfg.width - size, cfg.height - size], np.float64)
    theta = rng.uniform(0, 2 * np.pi)
    d = np.array([np.cos(theta), np.sin(theta)])
    if kind == "static":
        offs = np.zeros((cfg.frames, 2))
        v = np.zeros(2)
    elif kind == "linear":
        v = speed * d
        offs = t[:, None] * v
    elif kind == "reversing":
        v = speed * d
        offs = np.minimum(t, cfg.frames - 1 - t)[:, None] * v
    elif kind == "oscillating":
        period = int(rng.integers(cfg.period_min, cfg.period_max + 1))
        amp = speed * period / (2 * np.pi)
        v = speed * d
        offs = (amp * np.sin(2 * np.pi * t / period))[:, None] * d
    else:
        raise SceneError(f"unknown trajectory kind {kind!r}")
    span = offs.max(axis=0) - offs.min(axis=0)
    if np.any(span > lim):
        # shrink motion so the whole track fits
        shrink = float(np.min(lim / np.maximum(span, 1e-9)))
        offs *= shrink
        v = v * shrink
    lo = -offs.min(axis=0)
    hi = lim - offs.max(axis=0)
    p0 = lo + rng.random(2) * (hi - lo)
    return p0 + offs, (float(v[0]), float(v[1]))


def _contrasting_color(bg_luma, min_contrast, rng):
    for _ in range(1000):
        c = rng.uniform(0.1, 0.9, 3)
        if abs(float(np.dot(LUMA, c)) - bg_luma) >= min_contrast:
            return c
    return np.array([0.95, 0.95, 0.95]) if bg_luma < 0.5 else np.array([0.05, 0.05, 0.05])


def _drift_colors(color, cfg, n):
    if cfg.hue_drift == 0 and cfg.value_drift == 0:
        return np.tile(color, (n, 1))
    h, s, v = colorsys.rgb_to_hsv(*color)
    out = []
    for t in range(n):
        out.append(colorsys.hsv_to_rgb((h + cfg.hue_drift * t) % 1.0, s, min(1.0, v + cfg.value_drift * t)))
    return np.array(out)


def _composite(frame, premult, alpha, x, y):
    """Alpha-composite a padded premultiplied RGBA sprite at fractional (x, y)."""
    ix, iy = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - ix, y - iy
    ph, pw = alpha.shape
    # bilinear shift by (fx, fy) into a canvas one pixel larger
    def shift(a):
        out = np.zeros(a.shape[:-2] + (ph + 1, pw + 1))
        out[..., :ph, :pw] += (1 - fx) * (1 - fy) * a
        out[..., :ph, 1:] += fx * (1 - fy) * a
        out[..., 1:, :pw] += (1 - fx) * fy * a
        out[..., 1:, 1:] += fx * fy * a
        return out

    pm, al = shift(premult), shift(alpha)
    # sprite is padded by one pixel on each side
    ox, oy = ix - 1, iy - 1
    h, w = frame.shape[1:]
    x0, y0 = max(0, ox), max(0, oy)
    x1, y1 = min(w, ox + pw + 1), min(h, oy + ph + 1)
    if x0 >= x1 or y0 >= y1:
        return
    sl = (slice(y0 - oy, y1 - oy), slice(x0 - ox, x1 - ox))
    a = al[sl]
    frame[:, y0:y1, x0:x1] = frame[:, y0:y1, x0:x1] * (1 - a) + pm[(slice(None),) + sl]


def generate(cfg: SceneConfig, rng: np.random.Generator, clip_id: int = 0, seed: int = 0) -> FrameSequence:
    cfg.validate()
    h, w, T = cfg.height, cfg.width, cfg.frames
    bg_color = rng.uniform(0.2, 0.8, 3)
    bg = bg_color[:, None, None] + cfg.background_amplitude * smooth_noise(rng, (3, h, w), cfg.background_sigma)
    bg_luma = float(np.dot(LUMA, bg_color))
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    weights = np.asarray(cfg.kind_weights, np.float64)
    tracks, sprites = [], []
    for i in range(n_obj):
        size = int(rng.integers(cfg.size_min, cfg.size_max + 1))
        kind = TRAJECTORY_KINDS[int(rng.choice(len(TRAJECTORY_KINDS), p=weights / weights.sum()))]
        speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        positions, vel = _trajectory(kind, size, speed, cfg, rng)
        if cfg.hue_drift:
            hue = rng.random()
            color = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.75))
        else:
            color = _contrasting_color(bg_luma, cfg.min_contrast, rng)
        colors = _drift_colors(color, cfg, T)
        tex = cfg.texture_amplitude * smooth_noise(rng, (3, size, size), cfg.texture_sigma)
        tracks.append(ObjectTrack(i, size, kind, vel, tuple(float(c) for c in color), positions, colors))
        sprites.append(tex)
    frames = np.empty((T, 3, h, w), np.float32)
    for t in range(T):
        f = bg.copy()
        for tr, tex in zip(tracks, sprites):
            s = tr.size
            rgb = np.clip(tr.colors[t][:, None, None] + tex, 0, 1)
            alpha = np.zeros((s + 2, s + 2))
            alpha[1:-1, 1:-1] = 1
            pm = np.zeros((3, s + 2, s + 2))
            pm[:, 1:-1, 1:-1] = rgb
            _composite(f, pm, alpha, *tr.positions[t])
        frames[t] = quantize(f)
    return FrameSequence(frames, cfg.fps, MotionScript(tracks), seed=seed, clip_id=clip_id)


def color_shortcut_variant(cfg: SceneConfig, rng: np.random.Generator, hue_drift: float = 0.04,
                           clip_id: int = 0, seed: int = 0) -> FrameSequence:
    """Clip whose object hue rises by ``hue_drift`` per frame, so color alone reveals order."""
    if hue_drift <= 0:
        raise SceneError("hue_drift must be positive")
    if hue_drift * (cfg.frames - 1) >= 1:
        raise SceneError("hue drift wraps around within one clip")
    c = SceneConfig(**{f.name: getattr(cfg, f.name) for f in fields(SceneConfig)})
    c.hue_drift = hue_drift
    return generate(c, rng, clip_id=clip_id, seed=seed)


def generate_clips(cfg: SceneConfig, seed: int, count: int, start_id: int = 0,
                   shortcut_hue: float = 0.0) -> list[FrameSequence]:
    out = []
    for i in range(start_id, start_id + count):
        rng = make_rng(seed, "clip", i)
        if shortcut_hue > 0:
            out.append(color_shortcut_variant(cfg, rng, shortcut_hue, clip_id=i, seed=seed))
        else:
            out.append(generate(cfg, rng, clip_id=i, seed=seed))
    return out


# --- persistence -----------------------------------------------------------

def _fmt(a) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(a))


def save_clip(seq: FrameSequence, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    T, _, h, w = seq.frames.shape
    lines = [
        "format=seqsort-clip-1",
        f"clip_id={seq.clip_id}",
        f"seed={seq.seed}",
        f"frames={T}",
        f"height={h}",
        f"width={w}",
        f"fps={seq.fps!r}",
        f"objects={len(seq.script.objects)}",
    ]
    for i, o in enumerate(seq.script.objects):
        p = f"object.{i}."
        lines += [
            f"{p}texture_id={o.texture_id}",
            f"{p}size={o.size}",
            f"{p}kind={o.kind}",
            f"{p}velocity={_fmt(o.velocity)}",
            f"{p}color={_fmt(o.color)}",
            f"{p}positions={_fmt(o.positions)}",
            f"{p}colors={_fmt(o.colors)}",
        ]
    (d / "meta.txt").write_text("\n".join(lines) + "\n")
    u8 = to_u8(seq.frames)
    for t in range(T):
        (d / f"frame_{t:03d}.raw").write_bytes(u8[t].tobytes())
    return d


def read_keyvalue(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        out[k.strip()] = v.strip()
    return out


def load_clip(directory: str | Path) -> FrameSequence:
    d = Path(directory)
    try:
        meta = read_keyvalue(d / "meta.txt")
    except ValueError as e:
        raise ClipFormatError(str(e)) from e
    if meta.get("format") != "seqsort-clip-1":
        raise ClipFormatError(f"{d}: not a seqsort clip directory")
    try:
        return _load_clip(d, meta)
    except (KeyError, ValueError) as e:
        raise ClipFormatError(f"{d}: malformed clip ({type(e).__name__}: {e})") from e


def _load_clip(d: Path, meta: dict[str, str]) -> FrameSequence:
    T, h, w = int(meta["frames"]), int(meta["height"]), int(meta["width"])
    frames = np.empty((T, 3, h, w), np.float32)
    for t in range(T):
        raw = (d / f"frame_{t:03d}.raw").read_bytes()
        if len(raw) != 3 * h * w:
            raise ClipFormatError(f"{d}: frame {t} has {len(raw)} bytes, expected {3 * h * w}")
        frames[t] = np.frombuffer(raw, np.uint8).reshape(3, h, w).astype(np.float32) / 255
    floats = lambda s: np.array([float(v) for v in s.split(",")])  # noqa: E731
    objs = []
    for i in range(int(meta["objects"])):
        p = f"object.{i}."
        objs.append(ObjectTrack(
            texture_id=int(meta[p + "texture_id"]),
            size=int(meta[p + "size"]),
            kind=meta[p + "kind"],
            velocity=tuple(floats(meta[p + "velocity"])),
            color=tuple(floats(meta[p + "color"])),
            positions=floats(meta[p + "positions"]).reshape(T, 2),
            colors=floats(meta[p + "colors"]).reshape(T, 3),
        ))
    return FrameSequence(frames, float(meta["fps"]), MotionScript(objs),
                         seed=int(meta["seed"]), clip_id=int(meta["clip_id"]))
