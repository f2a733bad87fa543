"""Global/local spatial-temporal view sampling and temporally consistent augmentation.

A view picks a frame count from its configured set, samples frame indices
uniformly at the implied rate (cyclically wrapped when the clip is short),
crops a region, resizes bilinearly, and applies one augmentation parameter
draw to every frame. All randomness flows from a stream derived from
(seed, clip id, epoch), so view generation is order-independent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import VideoClip


@dataclass(frozen=True)
class ViewConfig:
    global_size: int = 32
    local_size: int = 16
    t_global: Tuple[int, ...] = (4, 8)
    t_local: Tuple[int, ...] = (2, 4)
    global_crop_scale: Tuple[float, float] = (0.4, 1.0)
    local_crop_scale: Tuple[float, float] = (0.05, 0.4)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: Tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1)
    blur_sigma_range: Tuple[float, float] = (0.1, 2.0)
    solarize_threshold: float = 0.5
    augment: bool = True
    local_spatial_only: bool = False   # locals keep the global frame-rate recipe
    local_temporal_only: bool = False  # locals keep the full frame (no spatial crop)

    def __post_init__(self):
        if not self.t_global or not self.t_local:
            raise ValueError("frame-count sets must be non-empty")
        if min(self.t_local) > min(self.t_global):
            raise ValueError(
                f"min local frame count {min(self.t_local)} exceeds min global {min(self.t_global)}; "
                "local views could not stay shorter than every global view")


# Paper-scale recipe: 2 globals at 224, 8 locals at 96.
PAPER_VIEWS = ViewConfig(global_size=224, local_size=96,
                         t_global=(8, 16), t_local=(2, 4, 8, 16))


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    blur_sigma: float = 0.0
    solarize: bool = False
    solarize_threshold: float = 0.5


IDENTITY_AUGMENT = AugmentParams()


@dataclass(frozen=True)
class ViewSpec:
    kind: str                      # "global" | "local"
    frame_count: int
    stride: int
    start: int
    crop: Tuple[float, float, float, float]  # (y0, x0, y1, x1) normalized
    out_size: Tuple[int, int]
    augment_seed: int

    def frame_indices(self, clip_frames: int) -> np.ndarray:
        idx = self.start + np.arange(self.frame_count) * self.stride
        return idx % clip_frames


@dataclass
class View:
    spec: ViewSpec
    frames: np.ndarray             # (T, 3, H, W) float32 in [0, 1]


def _clip_stream(seed: int, clip_id: str, epoch: int) -> np.random.Generator:
    digest = hashlib.sha256(clip_id.encode("utf-8")).digest()
    clip_key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, clip_key]))


def _sample_temporal(n_frames: int, t_view: int, rng: np.random.Generator) -> Tuple[int, int]:
    """(stride, start): ascending indices, cyclic wrap when the clip is short."""
    stride = max(1, n_frames // t_view)
    span = (t_view - 1) * stride + 1
    if span > n_frames:
        return stride, 0
    start = int(rng.integers(0, n_frames - span + 1))
    return stride, start


def _sample_crop(rng: np.random.Generator,
                 scale: Tuple[float, float]) -> Tuple[float, float, float, float]:
    """Random area-fraction crop with mild aspect jitter, clamped to the frame."""
    area = float(rng.uniform(scale[0], scale[1]))
    aspect = float(np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3))))
    ch = min(1.0, np.sqrt(area / aspect))
    cw = min(1.0, np.sqrt(area * aspect))
    y0 = float(rng.uniform(0.0, 1.0 - ch))
    x0 = float(rng.uniform(0.0, 1.0 - cw))
    return (y0, x0, y0 + ch, x0 + cw)


FULL_FRAME = (0.0, 0.0, 1.0, 1.0)


def resize_bilinear(frames: np.ndarray, crop: Tuple[float, float, float, float],
                    out_h: int, out_w: int) -> np.ndarray:
    """Crop-and-resize with pixel-center sampling (no corner alignment)."""
    t, c, h, w = frames.shape
    y0, x0, y1, x1 = crop
    sy0, sy1 = y0 * h, y1 * h
    sx0, sx1 = x0 * w, x1 * w
    ys = sy0 + (np.arange(out_h) + 0.5) * (sy1 - sy0) / out_h - 0.5
    xs = sx0 + (np.arange(out_w) + 0.5) * (sx1 - sx0) / out_w - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    iy0 = np.floor(ys).astype(np.int64)
    ix0 = np.floor(xs).astype(np.int64)
    iy1 = np.minimum(iy0 + 1, h - 1)
    ix1 = np.minimum(ix0 + 1, w - 1)
    wy = (ys - iy0).astype(np.float32)[:, None]
    wx = (xs - ix0).astype(np.float32)[None, :]
    f00 = frames[:, :, iy0[:, None], ix0[None, :]]
    f01 = frames[:, :, iy0[:, None], ix1[None, :]]
    f10 = frames[:, :, iy1[:, None], ix0[None, :]]
    f11 = frames[:, :, iy1[:, None], ix1[None, :]]
    top = f00 * (1 - wx) + f01 * wx
    bot = f10 * (1 - wx) + f11 * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


# -- augmentation ---------------------------------------------------------------

def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(delta, 1e-12)
    h = np.where(maxc == r, ((g - b) / safe) % 6.0,
                 np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def augment_view(frames: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply one parameter realization identically to every frame; clamps to [0,1]."""
    out = frames.astype(np.float32, copy=True)
    if params.flip:
        out = out[..., ::-1].copy()
    if params.brightness != 1.0:
        out = out * params.brightness
    if params.contrast != 1.0:
        gray_mean = (out * _LUMA[None, :, None, None]).sum(axis=1).mean(axis=(1, 2))
        out = gray_mean[:, None, None, None] + params.contrast * (out - gray_mean[:, None, None, None])
    if params.saturation != 1.0:
        gray = (out * _LUMA[None, :, None, None]).sum(axis=1, keepdims=True)
        out = gray + params.saturation * (out - gray)
    if params.hue != 0.0:
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0).transpose(0, 2, 3, 1))
        hsv[..., 0] = (hsv[..., 0] + params.hue) % 1.0
        out = _hsv_to_rgb(hsv).transpose(0, 3, 1, 2).astype(np.float32)
    if params.blur_sigma > 0.0:
        out = gaussian_filter(out, sigma=(0, 0, params.blur_sigma, params.blur_sigma),
                              mode="reflect").astype(np.float32)
    if params.solarize:
        out = np.where(out >= params.solarize_threshold, 1.0 - out, out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _draw_augment(rng: np.random.Generator, cfg: ViewConfig,
                  blur_p: float, solarize_p: float) -> AugmentParams:
    if not cfg.augment:
        return IDENTITY_AUGMENT
    bs, cs, ss, hs = cfg.jitter_strength
    flip = bool(rng.random() < cfg.flip_p)
    if rng.random() < cfg.jitter_p:
        brightness = float(rng.uniform(max(0.0, 1 - bs), 1 + bs))
        contrast = float(rng.uniform(max(0.0, 1 - cs), 1 + cs))
        saturation = float(rng.uniform(max(0.0, 1 - ss), 1 + ss))
        hue = float(rng.uniform(-hs, hs))
    else:
        brightness = contrast = saturation = 1.0
        hue = 0.0
    sigma = float(rng.uniform(*cfg.blur_sigma_range)) if rng.random() < blur_p else 0.0
    solarize = bool(rng.random() < solarize_p)
    return AugmentParams(flip=flip, brightness=brightness, contrast=contrast,
                         saturation=saturation, hue=hue, blur_sigma=sigma,
                         solarize=solarize, solarize_threshold=cfg.solarize_threshold)


# -- view sampling ----------------------------------------------------------------

def _materialize(clip: VideoClip, spec: ViewSpec, params: AugmentParams) -> View:
    idx = spec.frame_indices(clip.frames.shape[0])
    frames = clip.frames[idx]
    frames = resize_bilinear(frames, spec.crop, spec.out_size[0], spec.out_size[1])
    return View(spec=spec, frames=augment_view(frames, params))


def sample_global_views(clip: VideoClip, rng: np.random.Generator,
                        cfg: ViewConfig, count: int = 2) -> List[View]:
    """Large-crop views at global resolution, frame counts from the global set."""
    if clip.frames.shape[0] < 2:
        raise ValueError(f"clip {clip.clip_id} too short for view sampling")
    out = []
    for i in range(count):
        t_view = int(rng.choice(cfg.t_global))
        stride, start = _sample_temporal(clip.frames.shape[0], t_view, rng)
        crop = _sample_crop(rng, cfg.global_crop_scale)
        aug_seed = int(rng.integers(0, 2 ** 31))
        # Blur almost always on the first global view; solarize only on the second.
        params = _draw_augment(np.random.default_rng(aug_seed), cfg,
                               blur_p=1.0 if i == 0 else 0.1,
                               solarize_p=0.2 if i == 1 else 0.0)
        spec = ViewSpec(kind="global", frame_count=t_view, stride=stride, start=start,
                        crop=crop, out_size=(cfg.global_size, cfg.global_size),
                        augment_seed=aug_seed)
        out.append(_materialize(clip, spec, params))
    return out


def sample_local_views(clip: VideoClip, rng: np.random.Generator, cfg: ViewConfig,
                       count: int = 8, max_t: Optional[int] = None) -> List[View]:
    """Small-crop low-resolution views; frame count never exceeds ``max_t``."""
    if clip.frames.shape[0] < 2:
        raise ValueError(f"clip {clip.clip_id} too short for view sampling")
    out = []
    for _ in range(count):
        if cfg.local_spatial_only:
            # Temporal recipe pinned to the (shortest) global rate; crops still vary.
            t_view = max_t if max_t is not None else max(cfg.t_global)
        else:
            eligible = [t for t in cfg.t_local if max_t is None or t <= max_t]
            t_view = int(rng.choice(eligible))
        stride, start = _sample_temporal(clip.frames.shape[0], t_view, rng)
        if cfg.local_temporal_only:
            crop = FULL_FRAME
        else:
            crop = _sample_crop(rng, cfg.local_crop_scale)
        aug_seed = int(rng.integers(0, 2 ** 31))
        params = _draw_augment(np.random.default_rng(aug_seed), cfg,
                               blur_p=0.1, solarize_p=0.0)
        spec = ViewSpec(kind="local", frame_count=t_view, stride=stride, start=start,
                        crop=crop, out_size=(cfg.local_size, cfg.local_size),
                        augment_seed=aug_seed)
        out.append(_materialize(clip, spec, params))
    return out


def sample_views_for_clip(clip: VideoClip, cfg: ViewConfig, seed: int, epoch: int,
                          n_global: int = 2, n_local: int = 8) -> Tuple[List[View], List[View]]:
    """All views for one clip; fully determined by (seed, clip id, epoch)."""
    rng = _clip_stream(seed, clip.clip_id, epoch)
    globals_ = sample_global_views(clip, rng, cfg, count=n_global)
    max_t = min(v.spec.frame_count for v in globals_)
    locals_ = sample_local_views(clip, rng, cfg, count=n_local, max_t=max_t)
    return globals_, locals_
