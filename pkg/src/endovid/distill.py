"""Teacher-student pre-training engine.

The student consumes every view and trains by gradient descent; the teacher
consumes only global views, its logits centered and sharpened into targets,
and its weights track the student through an exponential moving average. The
objective sums a cross-view term (global targets predicted from local views)
and a motion term (global targets predicted from the other global views).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward, zero_grads
from .optim import OptimizerState, adamw_step, make_schedule, cosine_lr
from .model import ModelConfig, init_params, model_forward
from .views import ViewConfig, sample_views_for_clip
from .data import VideoClip, Checkpoint, save_checkpoint, params_to_arrays, arrays_to_params

METRICS_COLUMNS = ("step", "epoch", "loss_cv", "loss_dm", "loss_total",
                   "teacher_entropy", "lr")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float, last_checkpoint: Optional[str]):
        ref = last_checkpoint or "<none written yet>"
        super().__init__(f"non-finite loss {value} at step {step}; last good checkpoint: {ref}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class DistillConfig:
    tau_teacher: float = 0.04
    tau_student: float = 0.07
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    n_global: int = 2
    n_local: int = 8
    epochs: int = 30
    batch_size: int = 4
    pair_mean: bool = True          # mean over pair count; False keeps the raw double sum
    centering: bool = True
    disable_cv: bool = False
    disable_dm: bool = False

    def __post_init__(self):
        if not (0 < self.tau_teacher < self.tau_student):
            raise ValueError(f"need 0 < tau_teacher < tau_student, got "
                             f"{self.tau_teacher} / {self.tau_student}")
        if not (0 <= self.ema_momentum <= 1):
            raise ValueError(f"ema_momentum outside [0, 1]: {self.ema_momentum}")
        if not (0 <= self.center_momentum < 1):
            raise ValueError(f"center_momentum outside [0, 1): {self.center_momentum}")


@dataclass
class DistillState:
    student: Dict[str, Tensor]
    teacher: Dict[str, Tensor]
    center: np.ndarray
    step: int = 0


def init_distill_state(model_cfg: ModelConfig, rng: np.random.Generator,
                       dtype=np.float32) -> DistillState:
    """Fresh student; teacher starts as an exact copy."""
    student = init_params(model_cfg, rng, dtype=dtype)
    teacher = {k: Tensor(p.data.copy(), requires_grad=False) for k, p in student.items()}
    return DistillState(student=student, teacher=teacher,
                        center=np.zeros(model_cfg.out_dim, dtype=dtype))


# -- distributions ------------------------------------------------------------

def teacher_distribution(logits: np.ndarray, center: np.ndarray, tau_teacher: float) -> np.ndarray:
    """Centered, sharpened teacher targets; constant w.r.t. the graph."""
    z = (logits - center) / tau_teacher
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def student_distribution(logits: Tensor, tau_student: float) -> Tensor:
    return T.softmax_with_temperature(logits, tau_student)


def student_log_distribution(logits: Tensor, tau_student: float) -> Tensor:
    return T.log_softmax_with_temperature(logits, tau_student)


def entropy(probs: np.ndarray) -> float:
    """Mean Shannon entropy (nats) over leading axes."""
    p = np.clip(probs, 1e-12, None)
    return float(-(p * np.log(p)).sum(axis=-1).mean())


# -- losses ---------------------------------------------------------------------

def _pair_term(teacher_p: np.ndarray, student_logp: Tensor) -> Tensor:
    """Batch-mean cross-entropy of one (teacher view, student view) pair."""
    ce = T.neg(T.tsum(T.mul(student_logp, teacher_p), axis=-1))
    return T.tmean(ce)


def cross_view_loss(teacher_probs: Sequence[np.ndarray],
                    student_logp: Sequence[Tensor],
                    pair_mean: bool = True) -> Tuple[Tensor, int]:
    """Global teacher targets predicted from local student views.

    Returns (loss, pair count); a zero loss with count 0 flags the
    locals-disabled ablation.
    """
    count = len(teacher_probs) * len(student_logp)
    if count == 0:
        return Tensor(np.zeros((), dtype=np.float32)), 0
    total = None
    for p_t in teacher_probs:
        for logp in student_logp:
            term = _pair_term(p_t, logp)
            total = term if total is None else T.add(total, term)
    if pair_mean:
        total = T.mul(total, 1.0 / count)
    return total, count


def dynamic_motion_loss(teacher_probs: Sequence[np.ndarray],
                        student_logp: Sequence[Tensor],
                        pair_mean: bool = True) -> Tuple[Tensor, int]:
    """Each global teacher target predicted from the *other* global student views."""
    n = len(teacher_probs)
    count = n * (n - 1)
    if count == 0:
        return Tensor(np.zeros((), dtype=np.float32)), 0
    total = None
    for i in range(n):
        for k in range(n):
            if i == k:
                continue
            term = _pair_term(teacher_probs[i], student_logp[k])
            total = term if total is None else T.add(total, term)
    if pair_mean:
        total = T.mul(total, 1.0 / count)
    return total, count


def total_loss(cv: Tensor, dm: Tensor) -> Tensor:
    return T.add(cv, dm)


# -- state updates -----------------------------------------------------------------

def ema_update(state: DistillState, alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    s, t = state.student, state.teacher
    if set(s) != set(t):
        raise ValueError("student/teacher parameter names differ")
    for k in s:
        if s[k].data.shape != t[k].data.shape:
            raise ValueError(f"student/teacher shape mismatch at {k}: "
                             f"{s[k].data.shape} vs {t[k].data.shape}")
        t[k].data = alpha * t[k].data + (1.0 - alpha) * s[k].data


def center_update(center: np.ndarray, teacher_logits: np.ndarray,
                  momentum: float) -> np.ndarray:
    """Running mean of raw teacher logits (pre-centering)."""
    if teacher_logits.shape[0] == 0:
        raise ValueError("center update needs a non-empty batch")
    batch_mean = teacher_logits.mean(axis=0)
    return momentum * center + (1.0 - momentum) * batch_mean


# -- one optimisation step ------------------------------------------------------------

def _grouped_forward(views_frames: List[np.ndarray], params: Dict[str, Tensor],
                     model_cfg: ModelConfig) -> List[Tensor]:
    """Forward views batched by identical shape; returns per-view (1, K) rows."""
    groups: Dict[tuple, List[int]] = {}
    for i, frames in enumerate(views_frames):
        groups.setdefault(frames.shape, []).append(i)
    rows: List[Optional[Tensor]] = [None] * len(views_frames)
    for shape, idxs in groups.items():
        batch = np.stack([views_frames[i] for i in idxs])
        logits = model_forward(batch, params, model_cfg)
        for pos, i in enumerate(idxs):
            rows[i] = logits[pos:pos + 1]
    return rows  # type: ignore[return-value]


def train_step(clips: Sequence[VideoClip], state: DistillState,
               opt_state: OptimizerState, model_cfg: ModelConfig,
               view_cfg: ViewConfig, dcfg: DistillConfig,
               lr_now: float, seed: int, epoch: int) -> dict:
    """Sample views, compute both matching losses, update student/teacher/center."""
    b = len(clips)
    if b == 0:
        raise ValueError("empty batch")
    # The single-global ablation still samples two globals for motion matching
    # but lets only the longer one act as a cross-view target.
    n_global = max(dcfg.n_global, 2) if (dcfg.n_global == 1 and not dcfg.disable_dm) else dcfg.n_global

    per_clip = [sample_views_for_clip(c, view_cfg, seed, epoch,
                                      n_global=n_global, n_local=dcfg.n_local)
                for c in clips]

    def slot_frames(role: int, slot: int) -> List[np.ndarray]:
        return [per_clip[i][role][slot].frames for i in range(b)]

    global_frames = [f for s in range(n_global) for f in slot_frames(0, s)]
    local_frames = [f for s in range(dcfg.n_local) for f in slot_frames(1, s)]

    teacher_rows = _grouped_forward(global_frames, state.teacher, model_cfg)
    teacher_logits = [np.concatenate([teacher_rows[s * b + i].data for i in range(b)])
                      for s in range(n_global)]
    center = state.center if dcfg.centering else np.zeros_like(state.center)
    teacher_probs = [teacher_distribution(lg, center, dcfg.tau_teacher)
                     for lg in teacher_logits]

    student_global_rows = _grouped_forward(global_frames, state.student, model_cfg)
    student_global_logp = [
        student_log_distribution(T.concat([student_global_rows[s * b + i] for i in range(b)]),
                                 dcfg.tau_student)
        for s in range(n_global)]
    if dcfg.n_local > 0 and not dcfg.disable_cv:
        student_local_rows = _grouped_forward(local_frames, state.student, model_cfg)
        student_local_logp = [
            student_log_distribution(T.concat([student_local_rows[s * b + i] for i in range(b)]),
                                     dcfg.tau_student)
            for s in range(dcfg.n_local)]
    else:
        student_local_logp = []

    if dcfg.disable_cv:
        cv, cv_count = Tensor(np.zeros((), dtype=np.float32)), 0
    else:
        if dcfg.n_global == 1:
            # pick, per clip, the sampled global with more frames
            frame_counts = np.array([[per_clip[i][0][s].spec.frame_count
                                      for i in range(b)] for s in range(n_global)])
            pick = frame_counts.argmax(axis=0)
            longer = np.stack([teacher_probs[pick[i]][i] for i in range(b)])
            cv_targets = [longer]
        else:
            cv_targets = teacher_probs
        cv, cv_count = cross_view_loss(cv_targets, student_local_logp, dcfg.pair_mean)

    if dcfg.disable_dm:
        dm, dm_count = Tensor(np.zeros((), dtype=np.float32)), 0
    else:
        dm, dm_count = dynamic_motion_loss(teacher_probs, student_global_logp, dcfg.pair_mean)

    loss = total_loss(cv, dm)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise ValueError(f"non-finite loss {loss_val}")

    backward(loss)
    for k, p in state.teacher.items():
        assert p.grad is None, f"teacher parameter {k} received gradient"
    adamw_step(opt_state, state.student, lr_now)
    zero_grads(state.student.values())

    ema_update(state, dcfg.ema_momentum)
    state.center = center_update(state.center, np.concatenate(teacher_logits),
                                 dcfg.center_momentum)
    state.step += 1

    return {
        "loss_cv": float(cv.item()),
        "loss_dm": float(dm.item()),
        "loss_total": float(loss_val),
        "teacher_entropy": float(np.mean([entropy(p) for p in teacher_probs])),
        "center_norm": float(np.linalg.norm(state.center)),
        "lr": float(lr_now),
        "pair_count_cv": cv_count,
        "pair_count_dm": dm_count,
    }


# -- full run -------------------------------------------------------------------------

@dataclass
class RunResult:
    steps: int
    final_checkpoint: Path
    metrics_path: Path
    wall_clock_s: float
    last_metrics: dict = field(default_factory=dict)


def _batches(n_clips: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xBA7C4])).permutation(n_clips)
    return [order[i:i + batch_size] for i in range(0, n_clips, batch_size)]


def make_checkpoint(state: DistillState, opt_state: OptimizerState,
                    model_cfg: ModelConfig, seed: int) -> Checkpoint:
    arrays = {}
    arrays.update(params_to_arrays(state.student, "student"))
    arrays.update(params_to_arrays(state.teacher, "teacher"))
    arrays.update({f"opt_m/{k}": v.copy() for k, v in opt_state.m.items()})
    arrays.update({f"opt_v/{k}": v.copy() for k, v in opt_state.v.items()})
    arrays["center"] = state.center.copy()
    scalars = {
        "step": state.step,
        "opt_t": opt_state.t,
        "lr": opt_state.lr,
        "weight_decay": opt_state.weight_decay,
        "beta1": opt_state.beta1,
        "beta2": opt_state.beta2,
        "eps": opt_state.eps,
        "rng": {"seed": seed},
    }
    return Checkpoint(model_config=model_cfg.to_dict(), arrays=arrays, scalars=scalars)


def restore_from_checkpoint(ckpt: Checkpoint) -> Tuple[DistillState, OptimizerState, ModelConfig]:
    model_cfg = ModelConfig.from_dict(ckpt.model_config)
    student = arrays_to_params(ckpt.arrays, "student", requires_grad=True)
    teacher = arrays_to_params(ckpt.arrays, "teacher", requires_grad=False)
    state = DistillState(student=student, teacher=teacher,
                         center=ckpt.arrays["center"].copy(),
                         step=int(ckpt.scalars["step"]))
    s = ckpt.scalars
    opt_state = OptimizerState(
        m={k[len("opt_m/"):]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("opt_m/")},
        v={k[len("opt_v/"):]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("opt_v/")},
        t=int(s["opt_t"]), lr=s["lr"], weight_decay=s["weight_decay"],
        beta1=s["beta1"], beta2=s["beta2"], eps=s["eps"],
    )
    return state, opt_state, model_cfg


def pretrain_run(clips: Sequence[VideoClip], model_cfg: ModelConfig,
                 view_cfg: ViewConfig, dcfg: DistillConfig, out_dir: Path,
                 seed: int, lr: float = 2e-5, weight_decay: float = 4e-2,
                 max_steps: Optional[int] = None, checkpoint_every: int = 0,
                 resume: Optional[Checkpoint] = None,
                 log_fn=None) -> RunResult:
    """Full pre-training loop with metrics CSV and periodic checkpoints.

    Batch order, view sampling, and the schedule all derive from (seed, epoch,
    step) alone, so a run resumed from any checkpoint replays the remaining
    steps exactly.
    """
    if len(clips) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    steps_per_epoch = math.ceil(len(clips) / dcfg.batch_size)
    total_steps = dcfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    schedule = make_schedule(lr, total_steps)

    if resume is not None:
        state, opt_state, ckpt_model_cfg = restore_from_checkpoint(resume)
        if ckpt_model_cfg != model_cfg:
            raise ValueError("checkpoint model config does not match the run config")
    else:
        state = init_distill_state(model_cfg, np.random.default_rng(np.random.SeedSequence([seed, 0xD157])))
        opt_state = OptimizerState.init(state.student, lr=lr, weight_decay=weight_decay)

    metrics_path = out_dir / "metrics.csv"
    write_header = not metrics_path.exists() or metrics_path.stat().st_size == 0
    last_ckpt_path: Optional[str] = None
    start = time.monotonic()
    last_metrics: dict = {}

    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(METRICS_COLUMNS)
        step = state.step
        while step < total_steps:
            epoch = step // steps_per_epoch
            batch_idx = step % steps_per_epoch
            batches = _batches(len(clips), dcfg.batch_size, seed, epoch)
            batch = [clips[i] for i in batches[batch_idx]]
            lr_now = cosine_lr(schedule, step)
            try:
                metrics = train_step(batch, state, opt_state, model_cfg, view_cfg,
                                     dcfg, lr_now, seed, epoch)
            except ValueError as exc:
                if "non-finite loss" in str(exc):
                    raise TrainingDiverged(step, float("nan"), last_ckpt_path) from exc
                raise
            step = state.step
            writer.writerow([step, epoch,
                             repr(metrics["loss_cv"]), repr(metrics["loss_dm"]),
                             repr(metrics["loss_total"]), repr(metrics["teacher_entropy"]),
                             repr(metrics["lr"])])
            fh.flush()
            last_metrics = metrics
            if log_fn is not None:
                log_fn(step, metrics)
            if checkpoint_every and step % checkpoint_every == 0 and step < total_steps:
                p = out_dir / f"checkpoint_{step:06d}.ckpt"
                save_checkpoint(p, make_checkpoint(state, opt_state, model_cfg, seed))
                last_ckpt_path = str(p)

    final = out_dir / "final.ckpt"
    save_checkpoint(final, make_checkpoint(state, opt_state, model_cfg, seed))
    return RunResult(steps=state.step, final_checkpoint=final,
                     metrics_path=metrics_path,
                     wall_clock_s=time.monotonic() - start,
                     last_metrics=last_metrics)
