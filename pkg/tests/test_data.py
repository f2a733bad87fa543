"""Clip slicing, synthetic generation, PPM/manifest round trips, and the
checkpoint format guarantees."""

import json

import numpy as np
import pytest

from endovid.data import (Checkpoint, Manifest, VideoClip,
                          generate_synthetic_dataset, load_checkpoint, load_clip,
                          load_dataset, load_manifest, read_ppm, save_checkpoint,
                          save_dataset, slice_video_to_clips, synthesize_clip,
                          write_ppm, CHECKPOINT_VERSION)


def frames_of(n, size=8):
    return np.zeros((n, 3, size, size), dtype=np.float32)


class TestSlicing:
    def test_thirty_fps_five_seconds(self):
        clips = slice_video_to_clips(frames_of(300), fps=30, duration_s=5)
        assert [c.shape[0] for c in clips] == [150, 150]

    def test_remainder_kept_when_at_least_half(self):
        clips = slice_video_to_clips(frames_of(400), fps=30, duration_s=5)
        assert [c.shape[0] for c in clips] == [150, 150, 100]

    def test_remainder_dropped_below_half(self):
        clips = slice_video_to_clips(frames_of(370), fps=30, duration_s=5)
        assert [c.shape[0] for c in clips] == [150, 150]

    def test_empty_input(self):
        assert slice_video_to_clips(frames_of(0), 30, 5) == []

    def test_bad_args(self):
        with pytest.raises(ValueError):
            slice_video_to_clips(frames_of(10), 0, 5)
        with pytest.raises(ValueError):
            slice_video_to_clips(frames_of(10), 30, -1)


class TestSynthetic:
    def test_determinism(self):
        m1, c1 = generate_synthetic_dataset(4, 32, 8, ["left", "right"], seed=3)
        m2, c2 = generate_synthetic_dataset(4, 32, 8, ["left", "right"], seed=3)
        assert m1.to_dict() == m2.to_dict()
        for a, b in zip(c1, c2):
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_right_class_square_moves_right(self):
        clip = synthesize_clip("c", 32, 8, "right", np.random.default_rng(0))
        xs = []
        for t in range(8):
            mask = clip.frames[t].min(axis=0) > 0.5  # texture is bright on all channels
            xs.append(np.flatnonzero(mask.any(axis=0)).min())
        assert all(b > a for a, b in zip(xs, xs[1:]))

    def test_left_class_square_moves_left(self):
        clip = synthesize_clip("c", 32, 8, "left", np.random.default_rng(0))
        xs = []
        for t in range(8):
            mask = clip.frames[t].min(axis=0) > 0.5
            xs.append(np.flatnonzero(mask.any(axis=0)).min())
        assert all(b < a for a, b in zip(xs, xs[1:]))

    def test_fast_class_has_more_motion_energy(self):
        slow = synthesize_clip("s", 32, 8, "right", np.random.default_rng(1))
        fast = synthesize_clip("f", 32, 8, "right_fast", np.random.default_rng(1))

        def energy(clip):
            return np.abs(np.diff(clip.frames, axis=0)).mean()

        assert energy(fast) > energy(slow)

    def test_balanced_when_divisible(self):
        manifest, _ = generate_synthetic_dataset(10, 32, 8, ["left", "right"], seed=0)
        labels = [e.label for e in manifest.entries]
        assert labels.count("left") == labels.count("right") == 5

    def test_degenerate_size_rejected(self):
        with pytest.raises(ValueError):
            synthesize_clip("c", 8, 32, "right", np.random.default_rng(0))

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(4, 32, 8, ["left"], seed=0)

    def test_unknown_class_rejected(self):
        with pytest.raises(ValueError):
            synthesize_clip("c", 32, 8, "up", np.random.default_rng(0))


class TestPpm:
    def test_roundtrip_within_quantization(self, tmp_path):
        frame = np.random.default_rng(0).uniform(0, 1, (3, 5, 7)).astype(np.float32)
        path = tmp_path / "f.ppm"
        write_ppm(path, frame)
        back = read_ppm(path)
        assert back.shape == (3, 5, 7)
        assert np.abs(back - frame).max() <= 0.5 / 255 + 1e-6

    def test_malformed_names_path_and_offset(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\nxxxx")
        with pytest.raises(ValueError, match="bad.ppm.*byte 0"):
            read_ppm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
        with pytest.raises(ValueError, match="truncated"):
            read_ppm(path)


class TestDatasetRoundtrip:
    def test_save_load(self, tmp_path):
        manifest, clips = generate_synthetic_dataset(4, 16, 4, ["left", "right"], seed=1)
        save_dataset(tmp_path, manifest, clips)
        loaded = load_dataset(tmp_path)
        assert [c.clip_id for c in loaded] == [c.clip_id for c in clips]
        for a, b in zip(loaded, clips):
            assert a.label == b.label
            assert np.abs(a.frames - b.frames).max() <= 0.5 / 255 + 1e-6

    def test_missing_frame_file_named(self, tmp_path):
        manifest, clips = generate_synthetic_dataset(2, 16, 4, ["left", "right"], seed=1)
        save_dataset(tmp_path, manifest, clips)
        victim = tmp_path / "clip_0000" / "frame_00002.ppm"
        victim.unlink()
        entry = load_manifest(tmp_path).entries[0]
        with pytest.raises(FileNotFoundError, match="frame_00002"):
            load_clip(tmp_path, entry)

    def test_duplicate_id_rejected(self):
        d = {"dataset_name": "x", "seed": 0,
             "clips": [{"id": "a", "path": "a", "frame_count": 1, "fps": 30, "label": None},
                       {"id": "a", "path": "b", "frame_count": 1, "fps": 30, "label": None}]}
        with pytest.raises(ValueError, match="duplicate"):
            Manifest.from_dict(d)

    def test_manifest_checks_directories(self, tmp_path):
        manifest, clips = generate_synthetic_dataset(2, 16, 4, ["left", "right"], seed=1)
        save_dataset(tmp_path, manifest, clips)
        (tmp_path / "clip_0001" / "frame_00000.ppm").unlink()
        import shutil
        shutil.rmtree(tmp_path / "clip_0001")
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path)

    def test_frame_size_mismatch_rejected(self, tmp_path):
        manifest, clips = generate_synthetic_dataset(2, 16, 4, ["left", "right"], seed=1)
        save_dataset(tmp_path, manifest, clips)
        write_ppm(tmp_path / "clip_0000" / "frame_00001.ppm", np.zeros((3, 8, 8), dtype=np.float32))
        entry = load_manifest(tmp_path).entries[0]
        with pytest.raises(ValueError, match="shape"):
            load_clip(tmp_path, entry)

    def test_clip_invariants(self):
        with pytest.raises(ValueError):
            VideoClip("c", np.full((2, 3, 4, 4), 1.5, dtype=np.float32))
        with pytest.raises(ValueError):
            VideoClip("c", np.zeros((2, 1, 4, 4), dtype=np.float32))


class TestCheckpoint:
    @staticmethod
    def example(rng):
        arrays = {"a/w": rng.standard_normal((3, 4)).astype(np.float32),
                  "b/v": rng.standard_normal((5,)).astype(np.float32)}
        return Checkpoint(model_config={"embed_dim": 8}, arrays=arrays,
                          scalars={"step": 7, "rng": {"seed": 1}})

    def test_roundtrip_bit_identical(self, tmp_path):
        ckpt = self.example(np.random.default_rng(0))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, ckpt)
        loaded = load_checkpoint(p1)
        for k in ckpt.arrays:
            assert np.array_equal(loaded.arrays[k], ckpt.arrays[k])
        assert loaded.scalars == ckpt.scalars
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_mismatch_refused(self, tmp_path):
        ckpt = self.example(np.random.default_rng(1))
        ckpt.format_version = CHECKPOINT_VERSION + 1
        path = tmp_path / "v.ckpt"
        save_checkpoint(path, ckpt)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_truncated_refused(self, tmp_path):
        ckpt = self.example(np.random.default_rng(2))
        path = tmp_path / "t.ckpt"
        save_checkpoint(path, ckpt)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_non_float32_rejected_on_save(self, tmp_path):
        ckpt = self.example(np.random.default_rng(3))
        ckpt.arrays["a/w"] = ckpt.arrays["a/w"].astype(np.float64)
        with pytest.raises(ValueError, match="float32"):
            save_checkpoint(tmp_path / "x.ckpt", ckpt)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world\n")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_corrupt_length_field_detected(self, tmp_path):
        ckpt = self.example(np.random.default_rng(4))
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, ckpt)
        raw = path.read_bytes()
        header_end = raw.index(b"\n") + 1 + int(raw[len(b"ENDOVIDCKPT"):raw.index(b"\n")])
        header = json.loads(raw[raw.index(b"\n") + 1:header_end])
        header["arrays"][0]["nbytes"] -= 4
        new_header = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(b"ENDOVIDCKPT %d\n" % len(new_header) + new_header + b"\n"
                         + raw[header_end + 1:])
        with pytest.raises(ValueError, match="length"):
            load_checkpoint(path)
