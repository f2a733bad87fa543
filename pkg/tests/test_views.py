"""View sampling determinism, frame-index rules, crop bounds, and the
temporally consistent augmentation contracts."""

import numpy as np
import pytest

from endovid.data import VideoClip
from endovid.views import (AugmentParams, IDENTITY_AUGMENT, FULL_FRAME, ViewConfig,
                           ViewSpec, augment_view, resize_bilinear,
                           sample_global_views, sample_local_views,
                           sample_views_for_clip, _sample_temporal)


def make_clip(n_frames=16, size=32, seed=0, clip_id="clip_test"):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0, 1, (n_frames, 3, size, size)).astype(np.float32)
    return VideoClip(clip_id=clip_id, frames=frames)


@pytest.fixture
def cfg():
    return ViewConfig()


class TestTemporalSampling:
    def test_short_clip_cyclic_wrap(self):
        stride, start = _sample_temporal(4, 8, np.random.default_rng(0))
        assert (stride, start) == (1, 0)
        spec = ViewSpec(kind="global", frame_count=8, stride=1, start=0,
                        crop=FULL_FRAME, out_size=(8, 8), augment_seed=0)
        np.testing.assert_array_equal(spec.frame_indices(4), [0, 1, 2, 3, 0, 1, 2, 3])

    def test_indices_ascending_before_wrap(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n, t = int(rng.integers(2, 40)), int(rng.integers(2, 10))
            stride, start = _sample_temporal(n, t, rng)
            raw = start + np.arange(t) * stride
            assert (np.diff(raw) > 0).all()

    def test_full_cover_stride(self):
        stride, start = _sample_temporal(16, 4, np.random.default_rng(2))
        assert stride == 4
        assert 0 <= start <= 16 - 13


class TestViewSampling:
    def test_determinism_same_stream(self, cfg):
        clip = make_clip()
        g1, l1 = sample_views_for_clip(clip, cfg, seed=5, epoch=2)
        g2, l2 = sample_views_for_clip(clip, cfg, seed=5, epoch=2)
        for a, b in zip(g1 + l1, g2 + l2):
            assert a.spec == b.spec
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_different_epoch_changes_views(self, cfg):
        clip = make_clip()
        g1, _ = sample_views_for_clip(clip, cfg, seed=5, epoch=0)
        g2, _ = sample_views_for_clip(clip, cfg, seed=5, epoch=1)
        assert any(a.spec != b.spec for a, b in zip(g1, g2))

    def test_counts_and_sizes(self, cfg):
        clip = make_clip()
        g, l = sample_views_for_clip(clip, cfg, seed=0, epoch=0, n_global=2, n_local=8)
        assert len(g) == 2 and len(l) == 8
        for v in g:
            assert v.frames.shape[2:] == (cfg.global_size, cfg.global_size)
            assert v.spec.kind == "global"
        for v in l:
            assert v.frames.shape[2:] == (cfg.local_size, cfg.local_size)

    def test_local_frame_count_never_exceeds_global(self, cfg):
        clip = make_clip()
        for epoch in range(8):
            g, l = sample_views_for_clip(clip, cfg, seed=3, epoch=epoch)
            min_g = min(v.spec.frame_count for v in g)
            assert all(v.spec.frame_count <= min_g for v in l)

    def test_zero_locals_is_empty(self, cfg):
        clip = make_clip()
        _, l = sample_views_for_clip(clip, cfg, seed=0, epoch=0, n_local=0)
        assert l == []

    def test_too_short_clip_rejected(self, cfg):
        clip = make_clip(n_frames=1)
        with pytest.raises(ValueError):
            sample_global_views(clip, np.random.default_rng(0), cfg)
        with pytest.raises(ValueError):
            sample_local_views(clip, np.random.default_rng(0), cfg)

    def test_crop_rects_inside_unit_square(self, cfg):
        clip = make_clip()
        for epoch in range(5):
            g, l = sample_views_for_clip(clip, cfg, seed=9, epoch=epoch)
            for v in g + l:
                y0, x0, y1, x1 = v.spec.crop
                assert 0.0 <= y0 < y1 <= 1.0
                assert 0.0 <= x0 < x1 <= 1.0

    def test_spatial_only_ablation(self):
        cfg = ViewConfig(local_spatial_only=True)
        clip = make_clip()
        g, l = sample_views_for_clip(clip, cfg, seed=4, epoch=0)
        counts = {v.spec.frame_count for v in l}
        assert len(counts) == 1
        crops = {v.spec.crop for v in l}
        assert len(crops) > 1

    def test_temporal_only_ablation(self):
        cfg = ViewConfig(local_temporal_only=True)
        clip = make_clip()
        _, l = sample_views_for_clip(clip, cfg, seed=4, epoch=0)
        assert all(v.spec.crop == FULL_FRAME for v in l)

    def test_incompatible_frame_count_sets_rejected(self):
        with pytest.raises(ValueError):
            ViewConfig(t_global=(2,), t_local=(4, 8))


class TestResize:
    def test_full_frame_same_size_is_exact(self):
        frames = np.random.default_rng(0).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
        out = resize_bilinear(frames, FULL_FRAME, 8, 8)
        np.testing.assert_array_equal(out, frames)

    def test_constant_image_stays_constant(self):
        frames = np.full((1, 3, 16, 16), 0.625, dtype=np.float32)
        out = resize_bilinear(frames, (0.1, 0.2, 0.8, 0.9), 5, 7)
        np.testing.assert_allclose(out, 0.625, atol=1e-6)

    def test_output_shape(self):
        frames = np.zeros((4, 3, 32, 32), dtype=np.float32)
        assert resize_bilinear(frames, (0.0, 0.0, 0.5, 0.5), 16, 16).shape == (4, 3, 16, 16)

    def test_golden_downscale(self):
        # frozen oracle: pixel-center sampling computed by hand for a 4x4 -> 2x2
        # full-frame resize; sample points fall at fractional coords 0.5 and 2.5
        frame = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4) / 16.0
        frame = np.repeat(frame, 3, axis=1)
        out = resize_bilinear(frame, (0.0, 0.0, 1.0, 1.0), 2, 2)
        grid = frame[0, 0]
        expected = np.array([
            [(grid[0, 0] + grid[0, 1] + grid[1, 0] + grid[1, 1]) / 4,
             (grid[0, 2] + grid[0, 3] + grid[1, 2] + grid[1, 3]) / 4],
            [(grid[2, 0] + grid[2, 1] + grid[3, 0] + grid[3, 1]) / 4,
             (grid[2, 2] + grid[2, 3] + grid[3, 2] + grid[3, 3]) / 4],
        ], dtype=np.float32)
        np.testing.assert_allclose(out[0, 0], expected, atol=1e-7)
        # frozen numeric values for regression pinning
        np.testing.assert_allclose(out[0, 0], [[0.15625, 0.28125], [0.65625, 0.78125]],
                                   atol=1e-7)


class TestAugment:
    def test_identity_params_bit_identical(self):
        frames = np.random.default_rng(1).uniform(0, 1, (3, 3, 8, 8)).astype(np.float32)
        out = augment_view(frames, IDENTITY_AUGMENT)
        np.testing.assert_array_equal(out, frames)

    def test_flip_is_involution(self):
        frames = np.random.default_rng(2).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
        flip = AugmentParams(flip=True)
        out = augment_view(augment_view(frames, flip), flip)
        np.testing.assert_array_equal(out, frames)

    def test_identical_frames_stay_identical(self):
        rng = np.random.default_rng(3)
        frame = rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)
        frames = np.stack([frame, frame, rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)])
        params = AugmentParams(flip=True, brightness=1.2, contrast=0.8,
                               saturation=1.1, hue=0.05, blur_sigma=0.7,
                               solarize=True)
        out = augment_view(frames, params)
        np.testing.assert_array_equal(out[0], out[1])
        assert np.abs(out[0] - out[2]).max() > 0

    def test_per_frame_equals_stacked(self):
        frames = np.random.default_rng(4).uniform(0, 1, (4, 3, 8, 8)).astype(np.float32)
        params = AugmentParams(flip=True, brightness=0.9, contrast=1.3,
                               saturation=0.7, hue=-0.08, blur_sigma=1.1,
                               solarize=True)
        stacked = augment_view(frames, params)
        per_frame = np.concatenate([augment_view(frames[i:i + 1], params)
                                    for i in range(4)])
        np.testing.assert_allclose(stacked, per_frame, atol=1e-6)

    def test_output_clamped(self):
        frames = np.random.default_rng(5).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
        out = augment_view(frames, AugmentParams(brightness=1.4, contrast=1.4))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_augment_disabled_config_yields_identity_params(self):
        cfg = ViewConfig(augment=False)
        clip = make_clip()
        g1, l1 = sample_views_for_clip(clip, cfg, seed=7, epoch=0)
        # re-materialize without augmentation by construction: identical call
        g2, l2 = sample_views_for_clip(clip, cfg, seed=7, epoch=0)
        for a, b in zip(g1 + l1, g2 + l2):
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_solarize_inverts_above_threshold(self):
        frames = np.array([[[[0.2, 0.8]]]], dtype=np.float32)  # (1,1,1,2)
        frames = np.repeat(frames, 3, axis=1)
        out = augment_view(frames, AugmentParams(solarize=True, solarize_threshold=0.5))
        np.testing.assert_allclose(out[0, 0, 0], [0.2, 1.0 - 0.8], atol=1e-6)

    def test_hue_shift_invertible(self):
        frames = np.random.default_rng(6).uniform(0.1, 0.9, (1, 3, 6, 6)).astype(np.float32)
        fwd = augment_view(frames, AugmentParams(hue=0.2))
        back = augment_view(fwd, AugmentParams(hue=-0.2))
        np.testing.assert_allclose(back, frames, atol=1e-5)
