"""Video transformer: patch embedding, interpolatable spatial/temporal position
tables, divided space-time attention blocks, class token, and projection head.

Every block runs temporal self-attention (same spatial site across frames),
then spatial self-attention (within each frame, class token included), then an
MLP, each stage pre-normalized with a residual. The class token skips temporal
attention; its spatial-attention output is averaged over frames.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    t_max: int = 8
    h_max: int = 32
    w_max: int = 32
    mlp_ratio: int = 4
    head_hidden_dim: int = 128
    head_bottleneck_dim: int = 32
    out_dim: int = 256

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.h_max % self.patch_size or self.w_max % self.patch_size:
            raise ValueError(f"spatial capacity {self.h_max}x{self.w_max} not divisible by patch size {self.patch_size}")
        if self.out_dim < 2:
            raise ValueError(f"out_dim must be >= 2, got {self.out_dim}")

    @property
    def grid_h(self) -> int:
        return self.h_max // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.w_max // self.patch_size

    @property
    def n_max(self) -> int:
        return self.grid_h * self.grid_w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Paper-scale recipe: ViT-B/16 geometry with the 65536-way projection head.
PAPER_SCALE = ModelConfig(patch_size=16, embed_dim=768, depth=12, num_heads=12,
                          t_max=16, h_max=224, w_max=224, mlp_ratio=4,
                          head_hidden_dim=2048, head_bottleneck_dim=256,
                          out_dim=65536)


@dataclass
class TokenGrid:
    """Patch tokens (B, T, N, D) plus one class token (B, D) per sample."""

    patches: Tensor
    cls: Tensor

    @property
    def t(self) -> int:
        return self.patches.shape[1]

    @property
    def n(self) -> int:
        return self.patches.shape[2]

    def token_count(self) -> int:
        return self.t * self.n + 1


def init_params(config: ModelConfig, rng: np.random.Generator,
                dtype=np.float32, table_std: float = 0.02) -> Dict[str, Tensor]:
    """Fresh parameter set; every array is a leaf tensor requiring grad.

    Weight matrices use fan-in scaling so activation magnitude survives the
    narrow desk-scale dims; position/class tables use a small fixed std.
    """
    d = config.embed_dim
    patch_in = 3 * config.patch_size * config.patch_size

    def w(shape, std=None):
        scale = (1.0 / np.sqrt(shape[0])) if std is None else std
        return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: Dict[str, Tensor] = {
        "patch_embed.w": w((patch_in, d)),
        "patch_embed.b": zeros((d,)),
        "cls_token": w((d,), std=table_std),
        "pos.spatial": w((config.n_max, d), std=table_std),
        "pos.temporal": w((config.t_max, d), std=table_std),
    }
    for i in range(config.depth):
        for stage in ("time", "space"):
            p = f"block{i}.attn_{stage}"
            params[f"{p}.wq"] = w((d, d))
            params[f"{p}.bq"] = zeros((d,))
            params[f"{p}.wk"] = w((d, d))
            params[f"{p}.bk"] = zeros((d,))
            params[f"{p}.wv"] = w((d, d))
            params[f"{p}.bv"] = zeros((d,))
            params[f"{p}.wo"] = w((d, d))
            params[f"{p}.bo"] = zeros((d,))
            params[f"block{i}.ln_{stage}.g"] = ones((d,))
            params[f"block{i}.ln_{stage}.b"] = zeros((d,))
        hidden = config.mlp_ratio * d
        params[f"block{i}.mlp.w1"] = w((d, hidden))
        params[f"block{i}.mlp.b1"] = zeros((hidden,))
        params[f"block{i}.mlp.w2"] = w((hidden, d))
        params[f"block{i}.mlp.b2"] = zeros((d,))
        params[f"block{i}.ln_mlp.g"] = ones((d,))
        params[f"block{i}.ln_mlp.b"] = zeros((d,))
    params["final_norm.g"] = ones((d,))
    params["final_norm.b"] = zeros((d,))

    params["head.w1"] = w((d, config.head_hidden_dim))
    params["head.b1"] = zeros((config.head_hidden_dim,))
    params["head.w2"] = w((config.head_hidden_dim, config.head_hidden_dim))
    params["head.b2"] = zeros((config.head_hidden_dim,))
    params["head.w3"] = w((config.head_hidden_dim, config.head_bottleneck_dim))
    params["head.b3"] = zeros((config.head_bottleneck_dim,))
    # Prototype layer: plain linear, no bias; small init keeps early logits
    # well inside the teacher temperature's dynamic range.
    params["head.proto"] = w((config.head_bottleneck_dim, config.out_dim), std=0.02)
    return params


# -- positional encoding interpolation ----------------------------------------

_INTERP_CACHE: Dict[tuple, np.ndarray] = {}


def _linear_interp_weights(n_src: int, n_dst: int, dtype) -> np.ndarray:
    """(n_dst, n_src) matrix for endpoint-preserving linear interpolation."""
    key = (n_src, n_dst, np.dtype(dtype).str)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    w = np.zeros((n_dst, n_src), dtype=dtype)
    if n_dst == 1:
        w[0, 0] = 1.0
    else:
        for i in range(n_dst):
            x = i * (n_src - 1) / (n_dst - 1)
            lo = int(np.floor(x))
            hi = min(lo + 1, n_src - 1)
            frac = x - lo
            w[i, lo] += 1.0 - frac
            w[i, hi] += frac
    _INTERP_CACHE[key] = w
    return w


def interpolate_temporal_encoding(table: Tensor, target: int) -> Tensor:
    """Slice of the temporal table for ``target`` frames (1-D linear).

    Works in both directions (tables are sized to the highest resolution, so
    the usual case is downsampling); endpoints are always preserved and no
    target falls outside the table's ends.
    """
    capacity = table.shape[0]
    if target <= 0:
        raise ValueError(f"temporal target must be positive, got {target}")
    if target == capacity:
        return table
    w = _linear_interp_weights(capacity, target, table.dtype)
    return T.matmul(Tensor(w), table)


def interpolate_spatial_encoding(table: Tensor, config: ModelConfig,
                                 grid_h: int, grid_w: int) -> Tensor:
    """Bilinear slice of the square spatial table for an (h, w) token grid."""
    if grid_h <= 0 or grid_w <= 0:
        raise ValueError(f"spatial target must be positive, got {grid_h}x{grid_w}")
    if grid_h == config.grid_h and grid_w == config.grid_w:
        return table
    d = table.shape[1]
    wr = _linear_interp_weights(config.grid_h, grid_h, table.dtype)
    wc = _linear_interp_weights(config.grid_w, grid_w, table.dtype)
    # Separable: rows first on the (H, W*D) layout, then columns on (W, h*D).
    rows = T.matmul(Tensor(wr), T.reshape(table, (config.grid_h, config.grid_w * d)))
    rows = T.reshape(rows, (grid_h, config.grid_w, d))
    cols = T.matmul(Tensor(wc), T.reshape(T.transpose(rows, (1, 0, 2)), (config.grid_w, grid_h * d)))
    out = T.transpose(T.reshape(cols, (grid_w, grid_h, d)), (1, 0, 2))
    return T.reshape(out, (grid_h * grid_w, d))


# -- forward pieces ------------------------------------------------------------

def patchify_and_embed(frames: np.ndarray, params: Dict[str, Tensor],
                       config: ModelConfig) -> TokenGrid:
    """Map (B, T, 3, H, W) frames to embedded tokens with positions added."""
    b, t, c, h, w = frames.shape
    p = config.patch_size
    if h % p or w % p:
        raise T.ShapeError(f"frame size {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n = gh * gw
    # (B,T,3,H,W) -> (B,T,N,3*P*P), channel-major within a patch
    x = frames.reshape(b, t, c, gh, p, gw, p)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6).reshape(b, t, n, c * p * p)
    tokens = T.add(T.matmul(Tensor(x, dtype=params["patch_embed.w"].dtype),
                            params["patch_embed.w"]), params["patch_embed.b"])

    spatial = interpolate_spatial_encoding(params["pos.spatial"], config, gh, gw)
    temporal = interpolate_temporal_encoding(params["pos.temporal"], t)
    tokens = T.add(tokens, T.reshape(spatial, (1, 1, n, config.embed_dim)))
    tokens = T.add(tokens, T.reshape(temporal, (1, t, 1, config.embed_dim)))

    cls = T.broadcast_to(T.reshape(params["cls_token"], (1, config.embed_dim)),
                         (b, config.embed_dim))
    return TokenGrid(patches=tokens, cls=cls)


def _mhsa(x: Tensor, params: Dict[str, Tensor], prefix: str, num_heads: int,
          attn_sink: Optional[list] = None) -> Tensor:
    """Multi-head self-attention over the second-to-last axis of (..., S, D)."""
    shape = x.shape
    s, d = shape[-2], shape[-1]
    dh = d // num_heads
    lead = shape[:-2]

    def split_heads(t: Tensor) -> Tensor:
        t = T.reshape(t, lead + (s, num_heads, dh))
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return T.transpose(t, perm)  # (..., heads, S, dh)

    q = split_heads(T.add(T.matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]))
    k = split_heads(T.add(T.matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]))
    v = split_heads(T.add(T.matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]))

    ndim = len(lead) + 3
    kt = T.transpose(k, tuple(range(ndim - 2)) + (ndim - 1, ndim - 2))
    scores = T.mul(T.matmul(q, kt), 1.0 / np.sqrt(dh))
    attn = T.softmax_with_temperature(scores, 1.0)
    if attn_sink is not None:
        attn_sink.append(attn.data.copy())
    out = T.matmul(attn, v)  # (..., heads, S, dh)
    perm_back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    out = T.reshape(T.transpose(out, perm_back), lead + (s, d))
    return T.add(T.matmul(out, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _mlp(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _ln(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def encoder_block_forward(grid: TokenGrid, params: Dict[str, Tensor], block: int,
                          config: ModelConfig,
                          attn_sink: Optional[list] = None) -> TokenGrid:
    """One divided space-time block; output grid has the input's shape."""
    pre = f"block{block}"
    x = grid.patches  # (B, T, N, D)
    b, t, n, d = x.shape

    # Temporal attention: sequences of T tokens at a fixed spatial site.
    ht = T.transpose(_ln(x, params, f"{pre}.ln_time"), (0, 2, 1, 3))  # (B,N,T,D)
    at = _mhsa(ht, params, f"{pre}.attn_time", config.num_heads, attn_sink)
    x = T.add(x, T.transpose(at, (0, 2, 1, 3)))

    # Spatial attention: the class token joins each frame's sequence.
    cls_rep = T.broadcast_to(T.reshape(grid.cls, (b, 1, 1, d)), (b, t, 1, d))
    seq = T.concat([cls_rep, x], axis=2)  # (B,T,N+1,D)
    asp = _mhsa(_ln(seq, params, f"{pre}.ln_space"), params, f"{pre}.attn_space",
                config.num_heads, attn_sink)
    x = T.add(x, asp[:, :, 1:, :])
    cls = T.add(grid.cls, T.tmean(asp[:, :, 0, :], axis=1))

    # MLP, shared weights for patch and class tokens.
    x = T.add(x, _mlp(_ln(x, params, f"{pre}.ln_mlp"), params, f"{pre}.mlp"))
    cls = T.add(cls, _mlp(_ln(cls, params, f"{pre}.ln_mlp"), params, f"{pre}.mlp"))
    return TokenGrid(patches=x, cls=cls)


def projection_head_forward(cls: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Three-layer MLP to a unit-norm bottleneck, then linear logits."""
    h = T.gelu(T.add(T.matmul(cls, params["head.w1"]), params["head.b1"]))
    h = T.gelu(T.add(T.matmul(h, params["head.w2"]), params["head.b2"]))
    h = T.add(T.matmul(h, params["head.w3"]), params["head.b3"])
    h = T.l2_normalize(h)
    return T.matmul(h, params["head.proto"])


def backbone_features(frames: np.ndarray, params: Dict[str, Tensor],
                      config: ModelConfig,
                      attn_sink: Optional[list] = None) -> Tensor:
    """Class-token features (B, D): final-block class token, normalized."""
    grid = patchify_and_embed(frames, params, config)
    for i in range(config.depth):
        grid = encoder_block_forward(grid, params, i, config, attn_sink)
    return _ln(grid.cls, params, "final_norm")


def model_forward(frames: np.ndarray, params: Dict[str, Tensor],
                  config: ModelConfig,
                  attn_sink: Optional[list] = None) -> Tensor:
    """Full forward: (B, T, 3, H, W) frames to head logits (B, K)."""
    if frames.ndim == 4:  # single view convenience
        frames = frames[None]
    return projection_head_forward(backbone_features(frames, params, config, attn_sink), params)
