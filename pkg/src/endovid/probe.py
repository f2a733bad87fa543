"""Linear probe: frozen backbone, class-token features, one linear classifier.

Features come from 8 uniformly spaced frames per clip resized to the global
resolution (no crop, no augmentation). The probe trains with the same engine
and optimizer as pre-training and reports accuracy, binary F1, and macro F1
on a seeded stratified 80/20 split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward, zero_grads
from .optim import OptimizerState, adamw_step
from .model import ModelConfig, backbone_features
from .views import resize_bilinear, FULL_FRAME
from .data import VideoClip

PROBE_FINETUNE_LR_SCALE = 0.1  # backbone moves slower than a fresh linear head


@dataclass
class ProbeConfig:
    frame_count: int = 8
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-4
    test_fraction: float = 0.2


@dataclass
class ProbeReport:
    accuracy: float
    f1_binary: float
    f1_macro: float
    classes: List[str]
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "f1_binary": self.f1_binary,
                "f1_macro": self.f1_macro, "classes": self.classes,
                "n_train": self.n_train, "n_test": self.n_test}


def uniform_frame_indices(n_frames: int, count: int) -> np.ndarray:
    """Evenly spaced, deterministic frame picks spanning the clip."""
    if n_frames >= count:
        return np.round(np.linspace(0, n_frames - 1, count)).astype(np.int64)
    return (np.arange(count) % n_frames).astype(np.int64)


def extract_features(clips: Sequence[VideoClip], params: Dict[str, Tensor],
                     model_cfg: ModelConfig, frame_count: int = 8,
                     size: Optional[int] = None) -> np.ndarray:
    """(n_clips, D) class-token features from the frozen backbone."""
    size = model_cfg.h_max if size is None else size
    feats = []
    for clip in clips:
        idx = uniform_frame_indices(clip.n_frames, frame_count)
        frames = resize_bilinear(clip.frames[idx], FULL_FRAME, size, size)
        feats.append(backbone_features(frames[None], params, model_cfg).data[0])
    return np.stack(feats)


def stratified_split(labels: Sequence[str], test_fraction: float,
                     seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled index split; at least one test sample per class."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D11]))
    labels = np.asarray(labels)
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        n_test = max(1, int(round(test_fraction * len(members))))
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    return np.sort(np.array(train_idx)), np.sort(np.array(test_idx))


def train_linear_classifier(x: np.ndarray, y: np.ndarray, n_classes: int,
                            cfg: ProbeConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax regression on frozen features; returns (W, b)."""
    n, d = x.shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11EA4]))
    params = {
        "w": Tensor((rng.standard_normal((d, n_classes)) / np.sqrt(d)).astype(np.float32),
                    requires_grad=True),
        "b": Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True),
    }
    opt = OptimizerState.init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    onehot = np.zeros((n, n_classes), dtype=np.float32)
    onehot[np.arange(n), y] = 1.0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([seed, 1 + epoch])).permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            xb = Tensor(x[sel].astype(np.float32))
            logits = T.add(T.matmul(xb, params["w"]), params["b"])
            logp = T.log_softmax_with_temperature(logits, 1.0)
            loss = T.neg(T.tmean(T.tsum(T.mul(logp, onehot[sel]), axis=-1)))
            backward(loss)
            adamw_step(opt, params, cfg.lr)
            zero_grads(params.values())
    return params["w"].data.copy(), params["b"].data.copy()


def predict(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (x @ w + b).argmax(axis=-1)


def f1_score(y_true: np.ndarray, y_pred: np.ndarray, positive: int) -> float:
    tp = int(((y_pred == positive) & (y_true == positive)).sum())
    fp = int(((y_pred == positive) & (y_true != positive)).sum())
    fn = int(((y_pred != positive) & (y_true == positive)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    return float(np.mean([f1_score(y_true, y_pred, c) for c in range(n_classes)]))


def _finetune_and_predict(clips: Sequence[VideoClip], params: Dict[str, Tensor],
                          model_cfg: ModelConfig, probe_cfg: ProbeConfig,
                          y: np.ndarray, n_classes: int,
                          train_idx: np.ndarray, test_idx: np.ndarray,
                          seed: int) -> np.ndarray:
    """Joint training of backbone and classification layer (the unfrozen path)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF17E]))
    # backbone only; the pre-training projection head plays no role downstream
    trainable = {k: Tensor(p.data.copy().astype(np.float32), requires_grad=True)
                 for k, p in params.items() if not k.startswith("head.")}
    head = {
        "cls.w": Tensor((rng.standard_normal((model_cfg.embed_dim, n_classes))
                         / np.sqrt(model_cfg.embed_dim)).astype(np.float32),
                        requires_grad=True),
        "cls.b": Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True),
    }
    everything = {**trainable, **head}
    opt = OptimizerState.init(everything, lr=probe_cfg.lr * PROBE_FINETUNE_LR_SCALE,
                              weight_decay=probe_cfg.weight_decay)
    size = model_cfg.h_max

    def logits_for(idx):
        frames = np.stack([
            resize_bilinear(clips[i].frames[uniform_frame_indices(clips[i].n_frames,
                                                                  probe_cfg.frame_count)],
                            FULL_FRAME, size, size) for i in idx])
        feats = backbone_features(frames, trainable, model_cfg)
        return T.add(T.matmul(feats, head["cls.w"]), head["cls.b"])

    onehot = np.zeros((len(clips), n_classes), dtype=np.float32)
    onehot[np.arange(len(clips)), y] = 1.0
    for epoch in range(probe_cfg.epochs):
        order = train_idx[np.random.default_rng(np.random.SeedSequence([seed, 7 + epoch]))
                          .permutation(len(train_idx))]
        for start in range(0, len(order), probe_cfg.batch_size):
            sel = order[start:start + probe_cfg.batch_size]
            logp = T.log_softmax_with_temperature(logits_for(sel), 1.0)
            loss = T.neg(T.tmean(T.tsum(T.mul(logp, onehot[sel]), axis=-1)))
            backward(loss)
            adamw_step(opt, everything, opt.lr)
            zero_grads(everything.values())
    return logits_for(test_idx).data.argmax(axis=-1)


def run_probe(clips: Sequence[VideoClip], params: Dict[str, Tensor],
              model_cfg: ModelConfig, probe_cfg: ProbeConfig,
              seed: int, unfreeze: bool = False) -> ProbeReport:
    """Fit a classifier on backbone features and score the held-out split.

    Default is the frozen-backbone linear probe; ``unfreeze`` fine-tunes the
    whole backbone jointly with the classification layer instead.
    """
    labels = [c.label for c in clips]
    if any(l is None for l in labels):
        raise ValueError("probe needs a labeled dataset; found unlabeled clips")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError(f"probe refused: dataset has a single class {classes}")
    class_to_idx = {c: i for i, c in enumerate(classes)}
    y = np.array([class_to_idx[l] for l in labels])
    train_idx, test_idx = stratified_split(labels, probe_cfg.test_fraction, seed)

    if unfreeze:
        y_pred = _finetune_and_predict(clips, params, model_cfg, probe_cfg, y,
                                       len(classes), train_idx, test_idx, seed)
    else:
        x = extract_features(clips, params, model_cfg, frame_count=probe_cfg.frame_count)
        # standardize with train statistics; backbone feature scale varies wildly
        mu = x[train_idx].mean(axis=0)
        sd = np.maximum(x[train_idx].std(axis=0), 1e-8)
        x = (x - mu) / sd
        w, b = train_linear_classifier(x[train_idx], y[train_idx], len(classes),
                                       probe_cfg, seed)
        y_pred = predict(x[test_idx], w, b)
    y_true = y[test_idx]
    return ProbeReport(
        accuracy=float((y_pred == y_true).mean()),
        f1_binary=f1_score(y_true, y_pred, positive=1 if len(classes) > 1 else 0),
        f1_macro=macro_f1(y_true, y_pred, len(classes)),
        classes=classes,
        n_train=len(train_idx),
        n_test=len(test_idx),
    )
