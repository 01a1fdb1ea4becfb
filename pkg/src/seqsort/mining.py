"""Tuple mining: motion-aware window selection, jitter, channel transforms,
shuffling, and the binary dataset container.

Dataset file layout (little-endian), version 1::

    magic      4s   b"OPNT"
    version    u16
    n          u8   tuple length
    mode       u8   channel strategy index | 0x10 if diff input
    patch      u16  patch size P
    count      u64  number of samples
    samples    count x record
    crc32      u32  CRC-32 of every preceding byte

    record:
      clip_id  u32
      n_src    u8            source frames (n, or n+1 for diff input)
      frames   n_src x u16   chronological frame indices
      x, y     u16, u16      un-jittered patch corner
      offsets  n_src x (i8 dx, i8 dy)  applied jitter (after clamping)
      channel  n x u8        per-patch channel code, chronological order
      order    n x u8        shuffled[i] = chronological[order[i]]
      label    u8
      patches  n x 3 x P x P u8 (shuffled order, planar)
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import permutations as perms
from .flow import clip_flows, direction_consistency, patch_motion_score, window_scores
from .imaging import LUMA, to_u8
from .synth import FrameSequence
from .tensor import make_rng

CHANNEL_STRATEGIES = ("split", "swap", "drop", "gray", "rgb")
INPUT_MODES = ("rgb", "diff")
SAMPLING_STRATEGIES = ("random", "motion", "motion_direction")
SELECTION_RULES = ("topk", "threshold")
SWAP_PAIRS = ((0, 1), (0, 2), (1, 2))

MAGIC = b"OPNT"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


class MiningError(ValueError):
    pass


@dataclass
class MiningConfig:
    n: int = 4
    patch_size: int = 32
    t_min: int = 0
    # last usable frame; -1 means the clip's last frame
    t_max: int = -1
    gap_min: int = 1
    gap_max: int = 3
    strategy: str = "motion"
    selection: str = "topk"
    top_k: int = 6
    min_score: float = 1.0
    candidates: int = 12
    stride: int = 4
    jitter: int = 2
    channel: str = "split"
    input_mode: str = "rgb"
    direction_cone: float = 45.0

    def validate(self) -> None:
        perms.num_classes(self.n)
        if not 3 <= self.n <= perms.MAX_N:
            raise MiningError(f"tuple length must be in [3, {perms.MAX_N}], got {self.n}")
        if self.patch_size < 8:
            raise MiningError(f"patch_size must be >= 8, got {self.patch_size}")
        if self.jitter < 0 or self.jitter > 127:
            raise MiningError(f"jitter must be in [0, 127], got {self.jitter}")
        if self.t_max >= 0 and self.t_min >= self.t_max:
            raise MiningError("need t_min < t_max")
        if not 1 <= self.gap_min <= self.gap_max:
            raise MiningError("need 1 <= gap_min <= gap_max")
        for name, val, allowed in (
            ("strategy", self.strategy, SAMPLING_STRATEGIES),
            ("selection", self.selection, SELECTION_RULES),
            ("channel", self.channel, CHANNEL_STRATEGIES),
            ("input_mode", self.input_mode, INPUT_MODES),
        ):
            if val not in allowed:
                raise MiningError(f"{name} must be one of {allowed}, got {val!r}")
        if self.top_k < 1 or self.candidates < 1 or self.stride < 1:
            raise MiningError("top_k, candidates and stride must be >= 1")

    @property
    def source_frames(self) -> int:
        return self.n + 1 if self.input_mode == "diff" else self.n

    @property
    def mode_byte(self) -> int:
        return CHANNEL_STRATEGIES.index(self.channel) | (0x10 if self.input_mode == "diff" else 0)


@dataclass
class Provenance:
    clip_id: int
    frames: tuple[int, ...]
    rect: tuple[int, int, int]
    offsets: tuple[tuple[int, int], ...]
    channel_codes: tuple[int, ...]
    order: tuple[int, ...]


@dataclass
class TupleSample:
    # (n, 3, P, P) uint8 in shuffled order
    patches: np.ndarray
    label: int
    provenance: Provenance = field(repr=False)

    def as_float(self) -> np.ndarray:
        return self.patches.astype(np.float32) / 255


# --- augmentations ---------------------------------------------------------

def spatial_jitter(rect, jitter: int, rng: np.random.Generator, count: int, frame_shape):
    """Independent integer shifts in [-J, J]^2 per frame, clamped to the frame.

    ``rect`` is (x, y, size). Returns per-frame (x, y, size) rectangles and the
    applied (clamped) offsets.
    """
    x, y, s = rect
    h, w = frame_shape
    if s > h or s > w:
        raise MiningError(f"patch size {s} exceeds frame {frame_shape}")
    rects, offs = [], []
    for _ in range(count):
        dx, dy = (int(v) for v in rng.integers(-jitter, jitter + 1, size=2)) if jitter else (0, 0)
        nx = min(max(x + dx, 0), w - s)
        ny = min(max(y + dy, 0), h - s)
        rects.append((nx, ny, s))
        offs.append((nx - x, ny - y))
    return rects, offs


def channel_transform(patch: np.ndarray, strategy: str, rng: np.random.Generator):
    """Return ``(transformed, code)`` for a (3, P, P) patch.

    Codes: split -> chosen channel; swap -> index into SWAP_PAIRS; drop ->
    bitmask of zeroed channels; gray and rgb -> 0.
    """
    if strategy == "rgb":
        return patch.copy(), 0
    if strategy == "split":
        c = int(rng.integers(3))
        return np.repeat(patch[c:c + 1], 3, axis=0), c
    if strategy == "swap":
        k = int(rng.integers(3))
        a, b = SWAP_PAIRS[k]
        out = patch.copy()
        out[[a, b]] = patch[[b, a]]
        return out, k
    if strategy == "drop":
        count = int(rng.integers(1, 3))
        chans = rng.choice(3, size=count, replace=False)
        out = patch.copy()
        out[chans] = 0
        return out, int(sum(1 << int(c) for c in chans))
    if strategy == "gray":
        g = LUMA[0] * patch[0] + LUMA[1] * patch[1] + LUMA[2] * patch[2]
        return np.repeat(g[None].astype(patch.dtype), 3, axis=0), 0
    raise MiningError(f"unknown channel strategy {strategy!r}")


def diff_transform(patches) -> list[np.ndarray]:
    """Consecutive differences ``p[t+1] - p[t]``, rescaled from [-1, 1] to [0, 1]."""
    if len(patches) < 2:
        raise MiningError("diff input needs at least two source frames")
    return [((patches[t + 1] - patches[t]) + 1) / 2 for t in range(len(patches) - 1)]


# --- mining ----------------------------------------------------------------

def _frame_range(cfg, T):
    t_max = T - 1 if cfg.t_max < 0 else min(cfg.t_max, T - 1)
    return cfg.t_min, t_max


def _draw_frames(cfg, rng, T):
    t_lo, t_hi = _frame_range(cfg, T)
    k = cfg.source_frames
    gaps = rng.integers(cfg.gap_min, cfg.gap_max + 1, size=k - 1)
    span = int(gaps.sum())
    if t_lo + span > t_hi:
        return None
    start = int(rng.integers(t_lo, t_hi - span + 1))
    return tuple(int(v) for v in np.concatenate([[start], start + np.cumsum(gaps)]))


def _crop(frame, rect):
    x, y, s = rect
    return frame[:, y:y + s, x:x + s]


def build_sample(clip: FrameSequence, frames, rect, cfg: MiningConfig, rng) -> TupleSample:
    """Crop, jitter, transform and shuffle one chronological tuple."""
    hw = clip.shape
    if cfg.input_mode == "diff":
        # one common shift keeps the difference images aligned
        rects, offs = spatial_jitter(rect, cfg.jitter, rng, 1, hw)
        rects, offs = rects * len(frames), offs * len(frames)
        src = [_crop(clip.frames[t], r) for t, r in zip(frames, rects)]
        chrono = diff_transform(src)
    else:
        rects, offs = spatial_jitter(rect, cfg.jitter, rng, len(frames), hw)
        chrono = [_crop(clip.frames[t], r) for t, r in zip(frames, rects)]
    out, codes = [], []
    for p in chrono:
        q, code = channel_transform(p, cfg.channel, rng)
        out.append(to_u8(q))
        codes.append(code)
    shuffled, label, order = perms.shuffle_with_label(out, rng)
    prov = Provenance(clip.clip_id, tuple(frames), tuple(int(v) for v in rect),
                      tuple(offs), tuple(codes), order)
    return TupleSample(np.stack(shuffled), label, prov)


def _rect_bounds(cfg, hw):
    h, w = hw
    lo = min(cfg.jitter, (w - cfg.patch_size) // 2, (h - cfg.patch_size) // 2)
    return lo, w - cfg.patch_size - lo, h - cfg.patch_size - lo


def select_windows(clip: FrameSequence, cfg: MiningConfig, rng, flows=None):
    """Choose (frames, rect, score) triples for one clip.

    Random sampling draws frames and rectangles uniformly. Motion sampling
    scores every sliding window by summed mean flow magnitude over the tuple
    span, keeps the best window per temporal candidate, and returns the top-k
    candidates scoring at least ``min_score`` (or all such in threshold mode).
    """
    T = len(clip)
    lo, x_hi, y_hi = _rect_bounds(cfg, clip.shape)
    P = cfg.patch_size
    if x_hi < lo or y_hi < lo:
        raise MiningError(f"patch size {P} does not fit frame {clip.shape}")
    if cfg.strategy == "random":
        picks = []
        for _ in range(cfg.top_k):
            fr = _draw_frames(cfg, rng, T)
            if fr is None:
                break
            x = int(rng.integers(lo, x_hi + 1))
            y = int(rng.integers(lo, y_hi + 1))
            picks.append((fr, (x, y, P), float("nan")))
        return picks

    flows = clip_flows(clip.frames) if flows is None else flows
    mags = np.stack([f.magnitude for f in flows])
    scores, xs, ys = window_scores(mags, flows[0].margin, P, cfg.stride)
    xsel = (xs >= lo) & (xs <= x_hi)
    ysel = (ys >= lo) & (ys <= y_hi)
    scores, xs, ys = scores[:, ysel][:, :, xsel], xs[xsel], ys[ysel]
    if scores.size == 0:
        return []
    csum = np.concatenate([np.zeros((1,) + scores.shape[1:]), np.cumsum(scores, axis=0)])
    found = {}
    for _ in range(cfg.candidates):
        fr = _draw_frames(cfg, rng, T)
        if fr is None or fr in found:
            continue
        span_score = csum[fr[-1]] - csum[fr[0]]
        flat = np.argsort(-span_score, axis=None, kind="stable")
        best = None
        for idx in flat[: 8 if cfg.strategy == "motion_direction" else 1]:
            iy, ix = np.unravel_index(idx, span_score.shape)
            rect = (int(xs[ix]), int(ys[iy]), P)
            if cfg.strategy == "motion_direction":
                if not direction_consistency(flows[fr[0]:fr[-1]], (rect[0], rect[1], P, P), cfg.direction_cone):
                    continue
            best = (fr, rect, float(span_score[iy, ix]))
            break
        if best is not None:
            found[fr] = best
    ranked = sorted(found.values(), key=lambda c: -c[2])
    ranked = [c for c in ranked if c[2] >= cfg.min_score]
    if cfg.selection == "topk":
        ranked = ranked[: cfg.top_k]
    return ranked


def mine_tuples(clip: FrameSequence, cfg: MiningConfig, rng: np.random.Generator, flows=None) -> list[TupleSample]:
    cfg.validate()
    k = cfg.source_frames
    span_min = cfg.gap_min * (k - 1)
    t_lo, t_hi = _frame_range(cfg, len(clip))
    if t_hi - t_lo < span_min:
        raise MiningError(f"clip of {len(clip)} frames is shorter than the tuple span {span_min + 1}")
    picks = select_windows(clip, cfg, rng, flows)
    return [build_sample(clip, fr, rect, cfg, rng) for fr, rect, _ in picks]


def tuple_score(clip: FrameSequence, sample: TupleSample, flows=None) -> float:
    """Motion score of a mined sample's (un-jittered) window over its span."""
    flows = clip_flows(clip.frames) if flows is None else flows
    fr = sample.provenance.frames
    x, y, s = sample.provenance.rect
    return patch_motion_score(flows[fr[0]:fr[-1]], (x, y, s, s))


def _mine_one(args):
    clip, cfg, seed = args
    return mine_tuples(clip, cfg, make_rng(seed, "mine", clip.clip_id))


def mine_clips(clips, cfg: MiningConfig, seed: int, threads: int = 1, limit: int | None = None) -> list[TupleSample]:
    """Mine every clip with a per-clip stream; output order follows the clip order."""
    cfg.validate()
    jobs = [(c, cfg, seed) for c in clips]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_mine_one, jobs))
    else:
        results = [_mine_one(j) for j in jobs]
    out = [s for r in results for s in r]
    return out[:limit] if limit is not None else out


# --- dataset file ----------------------------------------------------------

_HEADER = struct.Struct("<4sHBBHQ")


def write_dataset(path: str | Path, samples: list[TupleSample], cfg: MiningConfig | None = None,
                  mode_byte: int | None = None) -> Path:
    if not samples:
        raise DatasetFormatError("refusing to write an empty dataset")
    n, _, P, _ = samples[0].patches.shape
    if mode_byte is None:
        mode_byte = cfg.mode_byte if cfg is not None else CHANNEL_STRATEGIES.index("rgb")
    buf = bytearray(_HEADER.pack(MAGIC, VERSION, n, mode_byte, P, len(samples)))
    for s in samples:
        if s.patches.shape != (n, 3, P, P) or s.patches.dtype != np.uint8:
            raise DatasetFormatError("all samples must share tuple length and patch size (uint8)")
        pv = s.provenance
        k = len(pv.frames)
        buf += struct.pack(f"<IB{k}HHH", pv.clip_id, k, *pv.frames, pv.rect[0], pv.rect[1])
        buf += struct.pack(f"<{2 * k}b", *(v for o in pv.offsets for v in o))
        buf += struct.pack(f"<{n}B{n}BB", *pv.channel_codes, *pv.order, s.label)
        buf += s.patches.tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    path = Path(path)
    path.write_bytes(bytes(buf))
    return path


@dataclass
class DatasetHeader:
    n: int
    mode_byte: int
    patch_size: int
    count: int

    @property
    def channel(self) -> str:
        return CHANNEL_STRATEGIES[self.mode_byte & 0x0F]

    @property
    def input_mode(self) -> str:
        return "diff" if self.mode_byte & 0x10 else "rgb"


def read_dataset(path: str | Path) -> tuple[DatasetHeader, list[TupleSample]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise DatasetFormatError(f"{path}: file too short ({len(data)} bytes)")
    magic, version, n, mode, P, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise DatasetFormatError(f"{path}: checksum mismatch")
    if not 2 <= n <= perms.MAX_N or (mode & 0x0F) >= len(CHANNEL_STRATEGIES):
        raise DatasetFormatError(f"{path}: invalid header fields")
    off = _HEADER.size
    end = len(data) - 4
    samples = []
    patch_bytes = n * 3 * P * P
    try:
        for _ in range(count):
            clip_id, k = struct.unpack_from("<IB", data, off)
            off += 5
            fr = struct.unpack_from(f"<{k}H", data, off)
            off += 2 * k
            x, y = struct.unpack_from("<HH", data, off)
            off += 4
            flat = struct.unpack_from(f"<{2 * k}b", data, off)
            off += 2 * k
            vals = struct.unpack_from(f"<{n}B{n}BB", data, off)
            off += 2 * n + 1
            if off + patch_bytes > end:
                raise DatasetFormatError(f"{path}: truncated sample data")
            patches = np.frombuffer(data, np.uint8, patch_bytes, off).reshape(n, 3, P, P).copy()
            off += patch_bytes
            prov = Provenance(clip_id, tuple(fr), (x, y, P), tuple(zip(flat[::2], flat[1::2])),
                              tuple(vals[:n]), tuple(vals[n:2 * n]))
            samples.append(TupleSample(patches, vals[2 * n], prov))
    except struct.error as e:
        raise DatasetFormatError(f"{path}: truncated record ({e})") from e
    if off != end:
        raise DatasetFormatError(f"{path}: {end - off} trailing bytes after {count} samples")
    return DatasetHeader(n, mode, P, count), samples


def stack_samples(samples: list[TupleSample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, n, 3, P, P) float32 patches and (N,) int64 labels."""
    x = np.stack([s.patches for s in samples]).astype(np.float32) / 255
    y = np.array([s.label for s in samples], np.int64)
    return x, y
