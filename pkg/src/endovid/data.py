"""Clip ingestion, synthetic dataset generation, and binary persistence.

Frames live on disk as one P6 portable pixmap per frame under
``<clip_id>/frame_%05d.ppm``; a JSON manifest indexes them. Checkpoints are a
JSON header (offset table included) followed by raw little-endian float32
array payloads, written to a temporary file and atomically renamed.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = "ENDOVIDCKPT"
CHECKPOINT_VERSION = 1
FRAME_PATTERN = "frame_{:05d}.ppm"
MANIFEST_NAME = "manifest.json"


@dataclass
class VideoClip:
    clip_id: str
    frames: np.ndarray          # (T, 3, H, W) float32 in [0, 1]
    fps: float = 30.0
    label: Optional[str] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"clip {self.clip_id}: frames must be (T, 3, H, W), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError(f"clip {self.clip_id}: needs at least one frame")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"clip {self.clip_id}: pixel values outside [0, 1] ({lo}..{hi})")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    frame_count: int
    fps: float
    label: Optional[str] = None


@dataclass
class Manifest:
    dataset_name: str
    seed: int
    entries: List[ManifestEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "seed": self.seed,
            "clips": [{"id": e.clip_id, "path": e.path, "frame_count": e.frame_count,
                       "fps": e.fps, "label": e.label} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        entries = [ManifestEntry(clip_id=c["id"], path=c["path"], frame_count=c["frame_count"],
                                 fps=c["fps"], label=c.get("label")) for c in d["clips"]]
        ids = [e.clip_id for e in entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"manifest has duplicate clip ids: {dupes}")
        return cls(dataset_name=d["dataset_name"], seed=d["seed"], entries=entries)


# -- clip slicing -----------------------------------------------------------------

def slice_video_to_clips(frames: np.ndarray, fps: float,
                         duration_s: float) -> List[np.ndarray]:
    """Consecutive non-overlapping slices of round(fps * duration) frames.

    The final remainder is kept when it reaches half a clip length.
    """
    if fps <= 0 or duration_s <= 0:
        raise ValueError(f"fps and duration must be positive, got {fps}, {duration_s}")
    if frames.shape[0] == 0:
        return []
    clip_len = int(round(fps * duration_s))
    total = frames.shape[0]
    out = []
    for start in range(0, total, clip_len):
        piece = frames[start:start + clip_len]
        if piece.shape[0] == clip_len or piece.shape[0] * 2 >= clip_len:
            out.append(piece)
    return out


# -- synthetic data ----------------------------------------------------------------

def _motion_class(name: str) -> Tuple[int, int]:
    """(direction, speed px/frame) from a class name like 'right' or 'left_fast'."""
    base, _, mod = name.partition("_")
    if base not in ("left", "right"):
        raise ValueError(f"unknown motion class {name!r}; expected left/right with optional _fast")
    direction = 1 if base == "right" else -1
    speed = 2 if mod == "fast" else 1
    return direction, speed


def synthesize_clip(clip_id: str, size: int, n_frames: int, motion_class: str,
                    rng: np.random.Generator, fps: float = 30.0,
                    texture: Optional[np.ndarray] = None,
                    background: Optional[np.ndarray] = None) -> VideoClip:
    """Textured square drifting horizontally over a static noise background.

    Texture and background default to fresh draws from ``rng``; a dataset
    builder can pass shared ones so that the square's trajectory, not its
    looks, is what identifies a clip.
    """
    direction, speed = _motion_class(motion_class)
    square = max(4, size // 3)
    travel = speed * (n_frames - 1)
    if square >= size or travel + square > size:
        raise ValueError(f"square {square}px with travel {travel}px does not fit a {size}px frame")
    if background is None:
        background = rng.uniform(0.0, 0.45, size=(3, size, size)).astype(np.float32)
    if texture is None:
        texture = rng.uniform(0.55, 1.0, size=(3, square, square)).astype(np.float32)
    y = int(rng.integers(0, size - square + 1))
    if direction > 0:
        x0 = int(rng.integers(0, size - square - travel + 1))
    else:
        x0 = int(rng.integers(travel, size - square + 1))
    frames = np.empty((n_frames, 3, size, size), dtype=np.float32)
    for t in range(n_frames):
        x = x0 + direction * speed * t
        frame = background.copy()
        frame[:, y:y + square, x:x + square] = texture
        frames[t] = frame
    return VideoClip(clip_id=clip_id, frames=frames, fps=fps, label=motion_class)


def generate_synthetic_dataset(count: int, size: int, n_frames: int,
                               motion_classes: List[str], seed: int,
                               fps: float = 30.0, name: str = "synthetic",
                               shared_appearance: bool = False) -> Tuple[Manifest, List[VideoClip]]:
    """Seeded clip set with round-robin class assignment (balanced when divisible).

    With ``shared_appearance`` every clip reuses one texture/background draw,
    so a clip is identified purely by where its square sits and how it moves;
    by default each clip gets its own appearance.
    """
    if len(motion_classes) < 2:
        raise ValueError("need at least 2 motion classes for probe tasks")
    texture = background = None
    if shared_appearance:
        shared = np.random.default_rng(np.random.SeedSequence([seed, 0x7E47]))
        square = max(4, size // 3)
        background = shared.uniform(0.0, 0.45, size=(3, size, size)).astype(np.float32)
        texture = shared.uniform(0.55, 1.0, size=(3, square, square)).astype(np.float32)
    clips = []
    entries = []
    for i in range(count):
        cls = motion_classes[i % len(motion_classes)]
        clip_id = f"clip_{i:04d}"
        clip = synthesize_clip(clip_id, size, n_frames, cls,
                               np.random.default_rng(np.random.SeedSequence([seed, i])), fps,
                               texture=texture, background=background)
        clips.append(clip)
        entries.append(ManifestEntry(clip_id=clip_id, path=clip_id, frame_count=n_frames,
                                     fps=fps, label=cls))
    return Manifest(dataset_name=name, seed=seed, entries=entries), clips


# -- PPM frame files ----------------------------------------------------------------

def write_ppm(path: Path, frame: np.ndarray) -> None:
    """One (3, H, W) float frame to a binary P6 file, maxval 255."""
    _, h, w = frame.shape
    pixels = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]; errors name the path and byte offset."""
    raw = Path(path).read_bytes()

    def fail(offset: int, why: str):
        raise ValueError(f"{path}: malformed PPM at byte {offset}: {why}")

    pos = 0

    def token() -> str:
        nonlocal pos
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":  # comment to end of line
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            return token()
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            fail(start, "unexpected end of header")
        return raw[start:pos].decode("ascii")

    if token() != "P6":
        fail(0, "missing P6 magic")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        fail(pos, "non-numeric header field")
    if maxval != 255:
        fail(pos, f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    if len(raw) - pos < need:
        fail(len(raw), f"pixel payload truncated ({len(raw) - pos} of {need} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_dataset(out_dir: Path, manifest: Manifest, clips: List[VideoClip]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        clip_dir = out_dir / clip.clip_id
        clip_dir.mkdir(exist_ok=True)
        for t in range(clip.n_frames):
            write_ppm(clip_dir / FRAME_PATTERN.format(t), clip.frames[t])
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return manifest_path


def load_manifest(dataset_dir: Path) -> Manifest:
    dataset_dir = Path(dataset_dir)
    manifest = Manifest.from_dict(json.loads((dataset_dir / MANIFEST_NAME).read_text()))
    for entry in manifest.entries:
        clip_dir = dataset_dir / entry.path
        if not clip_dir.is_dir():
            raise FileNotFoundError(f"manifest entry {entry.clip_id}: missing directory {clip_dir}")
    return manifest


def load_clip(dataset_dir: Path, entry: ManifestEntry) -> VideoClip:
    clip_dir = Path(dataset_dir) / entry.path
    frames = []
    shape = None
    for t in range(entry.frame_count):
        path = clip_dir / FRAME_PATTERN.format(t)
        if not path.is_file():
            raise FileNotFoundError(f"clip {entry.clip_id}: missing frame file {path}")
        frame = read_ppm(path)
        if shape is None:
            shape = frame.shape
        elif frame.shape != shape:
            raise ValueError(f"clip {entry.clip_id}: frame {path} has shape {frame.shape}, expected {shape}")
        frames.append(frame)
    return VideoClip(clip_id=entry.clip_id, frames=np.stack(frames), fps=entry.fps,
                     label=entry.label)


def load_dataset(dataset_dir: Path) -> List[VideoClip]:
    manifest = load_manifest(dataset_dir)
    return [load_clip(dataset_dir, e) for e in manifest.entries]


# -- checkpoints --------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: dict
    arrays: Dict[str, np.ndarray]
    scalars: dict                      # step, opt_t, seed, and friends
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    names = sorted(ckpt.arrays)
    blobs = []
    offset = 0
    table = []
    for name in names:
        arr = ckpt.arrays[name]
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint array {name} must be float32, got {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape),
                      "dtype": "<f4", "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config,
        "scalars": ckpt.scalars,
        "arrays": table,
        "payload_nbytes": offset,
    }, sort_keys=True).encode("utf-8")

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(f"{CHECKPOINT_MAGIC} {len(header)}\n".encode("ascii"))
            f.write(header)
            f.write(b"\n")
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or not raw.startswith(CHECKPOINT_MAGIC.encode("ascii")):
        raise ValueError(f"{path}: not a checkpoint file")
    try:
        header_len = int(raw[len(CHECKPOINT_MAGIC):nl].strip())
    except ValueError:
        raise ValueError(f"{path}: malformed checkpoint header length")
    header_end = nl + 1 + header_len
    header = json.loads(raw[nl + 1:header_end].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format version "
                         f"{header['format_version']} (expected {CHECKPOINT_VERSION})")
    payload = raw[header_end + 1:]
    if len(payload) < header["payload_nbytes"]:
        raise ValueError(f"{path}: truncated payload ({len(payload)} of {header['payload_nbytes']} bytes)")
    arrays = {}
    for rec in header["arrays"]:
        expect = 4 * int(np.prod(rec["shape"])) if rec["shape"] else 4
        if rec["nbytes"] != expect:
            raise ValueError(f"{path}: array {rec['name']} length {rec['nbytes']} != 4*prod{tuple(rec['shape'])}")
        chunk = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if len(chunk) != rec["nbytes"]:
            raise ValueError(f"{path}: array {rec['name']} extends past end of file")
        arrays[rec["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(rec["shape"]).copy()
    return Checkpoint(model_config=header["model_config"], arrays=arrays,
                      scalars=header["scalars"], format_version=header["format_version"])


def params_to_arrays(params: Dict[str, Tensor], prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{k}": p.data.copy() for k, p in params.items()}


def arrays_to_params(arrays: Dict[str, np.ndarray], prefix: str,
                     requires_grad: bool) -> Dict[str, Tensor]:
    pre = prefix + "/"
    return {k[len(pre):]: Tensor(v.copy(), requires_grad=requires_grad)
            for k, v in arrays.items() if k.startswith(pre)}
