import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest

from seqsort import permutations as perms
from seqsort.imaging import LUMA, to_u8
from seqsort.mining import (CHANNEL_STRATEGIES, SWAP_PAIRS, DatasetFormatError, MiningConfig, MiningError,
                            channel_transform, diff_transform, mine_clips, mine_tuples, read_dataset, spatial_jitter,
                            stack_samples, tuple_score, write_dataset)
from seqsort.synth import SceneConfig, generate_clips
from seqsort.tensor import make_rng


@pytest.fixture(scope="module")
def clips():
    return generate_clips(SceneConfig(), 0, 6)


def reconstruct(clip, sample, channel):
    """Rebuild a sample's patches from its provenance alone."""
    pv = sample.provenance
    x, y, P = pv.rect
    chrono = []
    for t, (dx, dy), code in zip(pv.frames, pv.offsets, pv.channel_codes):
        p = clip.frames[t][:, y + dy:y + dy + P, x + dx:x + dx + P]
        if channel == "split":
            p = np.repeat(p[code:code + 1], 3, axis=0)
        elif channel == "swap":
            a, b = SWAP_PAIRS[code]
            p = p.copy()
            p[[a, b]] = p[[b, a]]
        elif channel == "drop":
            p = p.copy()
            for c in range(3):
                if code >> c & 1:
                    p[c] = 0
        chrono.append(to_u8(p))
    return np.stack([chrono[i] for i in pv.order])


@pytest.mark.parametrize("channel", ["split", "swap", "drop", "rgb"])
def test_patches_match_provenance(clips, channel):
    cfg = MiningConfig(channel=channel)
    for clip in clips[:3]:
        for s in mine_tuples(clip, cfg, make_rng(0, "t", clip.clip_id)):
            assert np.array_equal(s.patches, reconstruct(clip, s, channel))


def test_labels_restore_chronology(clips):
    samples = mine_clips(clips, MiningConfig(n=5, top_k=8), seed=1)
    assert samples
    for s in samples:
        back = perms.unshuffle(list(s.provenance.order), s.label)
        assert back in (list(range(5)), list(range(4, -1, -1)))
        assert list(s.provenance.frames) == sorted(s.provenance.frames)


def test_motion_windows_score_higher_than_random(clips):
    mot = mine_clips(clips, MiningConfig(top_k=4, min_score=0), 0)
    rnd = mine_clips(clips, MiningConfig(top_k=4, strategy="random"), 0)
    by_id = {c.clip_id: c for c in clips}
    m = np.mean([tuple_score(by_id[s.provenance.clip_id], s) for s in mot])
    r = np.mean([tuple_score(by_id[s.provenance.clip_id], s) for s in rnd])
    assert m > 1.4 * r


def test_threshold_selection_respects_min_score(clips):
    cfg = MiningConfig(selection="threshold", min_score=2.0)
    for clip in clips[:3]:
        for s in mine_tuples(clip, cfg, make_rng(0, clip.clip_id)):
            assert tuple_score(clip, s) >= 2.0 - 1e-9


def test_static_clip_yields_no_motion_tuples():
    clip = generate_clips(replace(SceneConfig(), kind_weights=(0, 0, 0, 1)), 0, 1)[0]
    assert mine_tuples(clip, MiningConfig(), make_rng(0)) == []
    assert len(mine_tuples(clip, MiningConfig(strategy="random"), make_rng(0))) == MiningConfig().top_k


def test_jitter_bounds_and_clamping():
    rng = make_rng(2)
    rects, offs = spatial_jitter((10, 10, 8), 2, rng, 200, (64, 64))
    arr = np.array(offs)
    assert arr.min() == -2 and arr.max() == 2
    rects, offs = spatial_jitter((0, 56, 8), 3, rng, 200, (64, 64))
    for (x, y, s), (dx, dy) in zip(rects, offs):
        assert 0 <= x <= 56 and 0 <= y <= 56
        assert (x, y) == (0 + dx, 56 + dy)
    with pytest.raises(MiningError):
        spatial_jitter((0, 0, 80), 1, rng, 1, (64, 64))


def test_channel_transforms():
    rng = make_rng(3)
    p = rng.random((3, 4, 4)).astype(np.float32)
    out, c = channel_transform(p, "split", rng)
    assert all(np.array_equal(out[k], p[c]) for k in range(3))
    out, c = channel_transform(p, "gray", rng)
    assert np.allclose(out[0], LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2], atol=1e-6)
    for _ in range(20):
        out, mask = channel_transform(p, "drop", rng)
        assert 1 <= bin(mask).count("1") <= 2
        for k in range(3):
            assert (not out[k].any()) == bool(mask >> k & 1)
    with pytest.raises(MiningError):
        channel_transform(p, "bogus", rng)


def test_diff_mode_uses_n_plus_one_frames(clips):
    cfg = MiningConfig(input_mode="diff", n=3)
    s = mine_tuples(clips[0], cfg, make_rng(0))[0]
    assert len(s.provenance.frames) == 4 and s.patches.shape[0] == 3
    assert len(set(s.provenance.offsets)) == 1


def test_too_short_clip():
    clip = generate_clips(SceneConfig(), 0, 1)[0]
    with pytest.raises(MiningError):
        mine_tuples(clip, MiningConfig(n=5, gap_min=4, gap_max=4), make_rng(0))


def test_bad_config():
    for bad in [dict(channel="x"), dict(n=6), dict(top_k=0), dict(patch_size=0)]:
        with pytest.raises(MiningError):
            MiningConfig(**bad).validate()


def test_parallel_mining_matches_serial(clips):
    a = mine_clips(clips, MiningConfig(), 5, threads=1)
    b = mine_clips(clips, MiningConfig(), 5, threads=2)
    assert len(a) == len(b)
    assert all(x.patches.tobytes() == y.patches.tobytes() and x.label == y.label for x, y in zip(a, b))


# --- dataset file ---------------------------------------------------------------

@pytest.fixture(scope="module")
def samples(clips):
    return mine_clips(clips, MiningConfig(), 0, limit=10)


def test_dataset_round_trip_is_bit_exact(tmp_path, samples):
    p1 = write_dataset(tmp_path / "a.opnt", samples, MiningConfig())
    header, back = read_dataset(p1)
    assert header.n == 4 and header.patch_size == 32 and header.count == len(samples)
    assert header.channel == "split" and header.input_mode == "rgb"
    p2 = write_dataset(tmp_path / "b.opnt", back, mode_byte=header.mode_byte)
    assert p1.read_bytes() == p2.read_bytes()
    x, y = stack_samples(back)
    assert x.shape == (len(samples), 4, 3, 32, 32) and x.dtype == np.float32
    assert y.tolist() == [s.label for s in samples]


def test_dataset_header_layout(tmp_path, samples):
    data = write_dataset(tmp_path / "a.opnt", samples, MiningConfig(channel="drop", input_mode="rgb")).read_bytes()
    magic, version, n, mode, P, count = struct.unpack_from("<4sHBBHQ", data)
    assert (magic, version, n, mode, P, count) == (b"OPNT", 1, 4, CHANNEL_STRATEGIES.index("drop"), 32, 10)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def _resign(data):
    return data[:-4] + struct.pack("<I", zlib.crc32(data[:-4]))


@pytest.mark.parametrize("mutate,match", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: _resign(d[:4] + struct.pack("<H", 9) + d[6:]), "version"),
    (lambda d: d[:30] + bytes([d[30] ^ 1]) + d[31:], "checksum"),
    (lambda d: _resign(d[:-4] + b"\0" + d[-4:]), "trailing"),
    (lambda d: _resign(d[:-200]), "truncated"),
    (lambda d: d[:10], "short"),
])
def test_corrupt_datasets_are_rejected(tmp_path, samples, mutate, match):
    p = write_dataset(tmp_path / "a.opnt", samples)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(DatasetFormatError, match=match):
        read_dataset(p)


def test_empty_dataset_refused(tmp_path):
    with pytest.raises(DatasetFormatError):
        write_dataset(tmp_path / "e.opnt", [])


# --- spec examples ------------------------------------------------------------------

def test_linear_object_windows_intersect_swept_area():
    cfg = replace(SceneConfig(), kind_weights=(1, 0, 0, 0), objects_min=1, objects_max=1)
    for clip in generate_clips(cfg, 3, 5):
        obj = clip.script.objects[0]
        for s in mine_tuples(clip, MiningConfig(min_score=0.5), make_rng(1, clip.clip_id)):
            x, y, P = s.provenance.rect
            pos = obj.positions[s.provenance.frames[0]:s.provenance.frames[-1] + 1]
            x0, y0 = pos.min(axis=0)
            x1, y1 = pos.max(axis=0) + obj.size
            assert x < x1 and x0 < x + P and y < y1 and y0 < y + P


def test_random_windows_cover_static_area_at_its_expected_rate():
    # Monte Carlo over ~1k random windows vs. the exact mean over every admissible corner
    clips = generate_clips(SceneConfig(), 0, 170)
    by_id = {c.clip_id: c for c in clips}
    cfg = MiningConfig(strategy="random")
    samples = mine_clips(clips, cfg, 0)
    assert len(samples) >= 1000
    mc, exact = [], []
    for s in samples:
        moving = by_id[s.provenance.clip_id].moving_mask()
        x, y, P = s.provenance.rect
        mc.append(1 - moving[y:y + P, x:x + P].mean())
        corners = range(cfg.jitter, 64 - P - cfg.jitter + 1)
        exact.append(np.mean([1 - moving[b:b + P, a:a + P].mean() for b in corners for a in corners]))
    assert abs(np.mean(mc) - np.mean(exact)) < 0.03


def test_zero_jitter_keeps_rectangles_identical():
    rects, offs = spatial_jitter((5, 7, 16), 0, make_rng(0), 4, (64, 64))
    assert set(rects) == {(5, 7, 16)} and set(offs) == {(0, 0)}


def test_jitter_five_hits_every_offset():
    _, offs = spatial_jitter((24, 24, 16), 5, make_rng(4), 10_000, (64, 64))
    arr = np.array(offs)
    assert set(arr[:, 0].tolist()) == set(range(-5, 6)) == set(arr[:, 1].tolist())


class FixedChoice:
    """rng stand-in whose integers() always returns ``value``."""

    def __init__(self, value):
        self.value = value

    def integers(self, *a, **k):
        return self.value


PIXEL = np.array([0.1, 0.2, 0.3], np.float32).reshape(3, 1, 1)


def test_split_on_green_duplicates_green():
    out, code = channel_transform(PIXEL, "split", FixedChoice(1))
    assert code == 1 and out.ravel().tolist() == pytest.approx([0.2] * 3)


def test_swap_red_blue():
    k = SWAP_PAIRS.index((0, 2))
    out, code = channel_transform(PIXEL, "swap", FixedChoice(k))
    assert code == k and out.ravel().tolist() == pytest.approx([0.3, 0.2, 0.1])


def test_gray_luminance_value():
    out, _ = channel_transform(PIXEL, "gray", make_rng(0))
    assert out.ravel().tolist() == pytest.approx([0.1815] * 3, abs=1e-4)


def test_diff_examples():
    a = make_rng(5).random((3, 4, 4)).astype(np.float32)
    assert np.all(diff_transform([a, a])[0] == 0.5)
    b = a.copy()
    b[1, 2, 3] += 0.4
    raw = 2 * diff_transform([a, b])[0] - 1
    nz = np.argwhere(np.abs(raw) > 1e-6)
    assert nz.tolist() == [[1, 2, 3]] and raw[1, 2, 3] == pytest.approx(0.4, abs=1e-6)
    seq = [make_rng(6, i).random((3, 4, 4)) for i in range(4)]
    fwd = [2 * d - 1 for d in diff_transform(seq)]
    bwd = [2 * d - 1 for d in diff_transform(seq[::-1])]
    for f, r in zip(fwd, bwd[::-1]):
        assert np.allclose(f, -r)
    with pytest.raises(MiningError):
        diff_transform([a])


def test_hundred_sample_round_trip(tmp_path, clips):
    many = mine_clips(generate_clips(SceneConfig(), 9, 20), MiningConfig(strategy="random"), 9, limit=100)
    assert len(many) == 100
    _, back = read_dataset(write_dataset(tmp_path / "h.opnt", many))
    for a, b in zip(many, back):
        assert a.patches.tobytes() == b.patches.tobytes() and a.label == b.label
        assert a.provenance == b.provenance


def test_empty_file_is_a_format_error(tmp_path):
    p = tmp_path / "empty.opnt"
    p.write_bytes(b"")
    with pytest.raises(DatasetFormatError):
        read_dataset(p)


def test_motion_tuples_meet_min_score(clips):
    cfg = MiningConfig()
    for clip in clips:
        for s in mine_tuples(clip, cfg, make_rng(2, clip.clip_id)):
            assert tuple_score(clip, s) >= cfg.min_score - 1e-9


def test_split_breaks_color_monotonicity_on_shortcut_data():
    # the hue ramp makes patch means monotone under rgb; a per-frame random channel scrambles it
    shortcut = generate_clips(SceneConfig(), 0, 20, shortcut_hue=0.04)
    samples = mine_clips(shortcut, MiningConfig(channel="split"), 0)
    codes_vary = [len(set(s.provenance.channel_codes)) > 1 for s in samples]
    assert np.mean(codes_vary) >= 0.5
    non_mono = []
    for s in samples:
        means = np.array([s.patches[i].mean() for i in np.argsort(s.provenance.order)], np.float64)
        d = np.diff(means)
        non_mono.append(not (np.all(d >= 0) or np.all(d <= 0)))
    assert np.mean(non_mono) >= 0.5


def test_augmentations_never_change_labels(clips):
    # same frames and shuffle, different jitter/channel draws: identical labels
    base = MiningConfig(jitter=0, channel="rgb")
    for cfg in (replace(base, jitter=5), replace(base, channel="split"), replace(base, channel="drop")):
        for clip in clips[:3]:
            for s in mine_tuples(clip, cfg, make_rng(0, clip.clip_id)):
                assert s.label == perms.class_of(np.argsort(s.provenance.order))
