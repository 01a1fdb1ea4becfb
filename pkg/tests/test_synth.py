from dataclasses import replace

import numpy as np
import pytest

from seqsort.synth import (ClipFormatError, SceneConfig, SceneError, color_shortcut_variant, generate,
                           generate_clips, load_clip, save_clip)
from seqsort.tensor import make_rng


def test_frames_are_on_the_8bit_grid():
    clip = generate(SceneConfig(), make_rng(0, "clip", 0))
    f = clip.frames
    assert f.shape == (16, 3, 64, 64) and f.dtype == np.float32
    assert f.min() >= 0 and f.max() <= 1
    assert np.array_equal(np.round(f * 255) / 255, f.astype(np.float64).astype(np.float32))


def test_same_seed_same_clip():
    a = generate_clips(SceneConfig(), 3, 2)
    b = generate_clips(SceneConfig(), 3, 2)
    for x, y in zip(a, b):
        assert x.frames.tobytes() == y.frames.tobytes()
    assert a[0].frames.tobytes() != a[1].frames.tobytes()


def test_clip_ids_index_independent_streams():
    full = generate_clips(SceneConfig(), 0, 4)
    tail = generate_clips(SceneConfig(), 0, 2, start_id=2)
    assert full[3].frames.tobytes() == tail[1].frames.tobytes()


def test_linear_objects_follow_script():
    cfg = replace(SceneConfig(), kind_weights=(1, 0, 0, 0), objects_min=1, objects_max=1)
    clip = generate(cfg, make_rng(5))
    obj = clip.script.objects[0]
    steps = np.diff(obj.positions, axis=0)
    # constant velocity except where the object bounces off a wall
    speeds = np.hypot(steps[:, 0], steps[:, 1])
    assert np.median(speeds) == pytest.approx(np.hypot(*obj.velocity), rel=1e-6)


def test_static_objects_do_not_move():
    cfg = replace(SceneConfig(), kind_weights=(0, 0, 0, 1))
    clip = generate(cfg, make_rng(2))
    for obj in clip.script.objects:
        assert np.ptp(obj.positions, axis=0).max() == 0
    assert clip.static_fraction() == 1.0
    assert np.array_equal(clip.frames[0], clip.frames[-1])


def test_infeasible_geometry_is_rejected():
    with pytest.raises(SceneError, match="infeasible"):
        generate(replace(SceneConfig(), height=20, width=20), make_rng(0))
    with pytest.raises(SceneError):
        generate(replace(SceneConfig(), kind_weights=(1, 1)), make_rng(0))


def test_color_shortcut_hue_is_monotone():
    import colorsys

    clip = color_shortcut_variant(SceneConfig(), make_rng(1), hue_drift=0.04)
    for obj in clip.script.objects:
        hues = [colorsys.rgb_to_hsv(*c)[0] for c in obj.colors]
        d = np.diff(hues)
        # hue may wrap once at 1.0
        d = np.where(d < -0.5, d + 1, d)
        assert np.all(d > 0)
    with pytest.raises(SceneError):
        color_shortcut_variant(SceneConfig(), make_rng(1), hue_drift=0.1)


def test_clip_round_trip(tmp_path):
    clip = generate_clips(SceneConfig(), 4, 1, start_id=7)[0]
    d = save_clip(clip, tmp_path / "c")
    back = load_clip(d)
    assert back.frames.tobytes() == clip.frames.tobytes()
    assert back.clip_id == 7 and back.seed == 4
    for a, b in zip(clip.script.objects, back.script.objects):
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.colors, b.colors)
        assert a.kind == b.kind and a.velocity == b.velocity


def test_corrupt_clip_directory(tmp_path):
    clip = generate_clips(SceneConfig(), 0, 1)[0]
    d = save_clip(clip, tmp_path / "c")
    (d / "frame_003.raw").write_bytes(b"short")
    with pytest.raises(ClipFormatError):
        load_clip(d)
    with pytest.raises(FileNotFoundError):
        load_clip(tmp_path / "missing")


def test_reversing_track_is_a_palindrome():
    cfg = replace(SceneConfig(), kind_weights=(0, 1, 0, 0))
    for seed in range(5):
        for obj in generate(cfg, make_rng(seed)).script.objects:
            T = len(obj.positions)
            assert all(np.array_equal(obj.positions[t], obj.positions[T - 1 - t]) for t in range(T))


def test_linear_centroid_advances_by_velocity_each_frame():
    cfg = replace(SceneConfig(), kind_weights=(1, 0, 0, 0))
    for seed in range(5):
        for obj in generate(cfg, make_rng(seed)).script.objects:
            assert np.allclose(np.diff(obj.centroids(), axis=0), obj.velocity, atol=1e-9)


def test_objects_meet_minimum_contrast():
    luma = np.array([0.299, 0.587, 0.114])
    for seed in range(10):
        clip = generate(SceneConfig(), make_rng(seed))
        bg = np.einsum("c,chw->hw", luma, clip.frames[0].astype(np.float64))
        covered = np.zeros(bg.shape, bool)
        for obj in clip.script.objects:
            x, y = np.floor(obj.positions[0]).astype(int)
            covered[max(0, y - 1):y + obj.size + 2, max(0, x - 1):x + obj.size + 2] = True
        bg_luma = np.median(bg[~covered])
        for obj in clip.script.objects:
            # background texture adds at most a few hundredths around its mean color
            assert abs(float(luma @ obj.color) - bg_luma) >= SceneConfig().min_contrast - 0.05
