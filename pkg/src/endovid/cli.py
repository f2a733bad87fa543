"""Command-line entry points: pretrain, gradcheck, probe, make-data, export-metrics.

Exit codes: 0 success, 1 runtime or check failure, 2 usage/config error.
Every command is deterministic given (config file, flags, seed); the seed
falls back to the ENDOVID_SEED environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .config import ConfigError, RunConfig, build_config, dump_config, load_config_file
from .data import (generate_synthetic_dataset, load_checkpoint, load_dataset,
                   save_dataset, slice_video_to_clips, synthesize_clip,
                   Manifest, ManifestEntry, VideoClip)
from .distill import (DistillConfig, TrainingDiverged, cross_view_loss,
                      init_distill_state, pretrain_run, student_log_distribution,
                      teacher_distribution, dynamic_motion_loss)
from .gradcheck import GradCheckFailure, grad_check
from .model import ModelConfig, init_params, model_forward
from .probe import run_probe
from .views import ViewConfig, sample_views_for_clip

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Acceptance-oriented gradient-check geometry: small enough for 64-bit
# finite differences over the full objective in minutes.
TINY_MODEL = dict(patch_size=4, embed_dim=64, depth=4, num_heads=4, t_max=4,
                  h_max=16, w_max=16, mlp_ratio=2, head_hidden_dim=64,
                  head_bottleneck_dim=16, out_dim=16)
TINY_VIEWS = dict(global_size=16, local_size=8, t_global=(2, 4), t_local=(2,))
TINY_DISTILL = dict(n_global=2, n_local=2, batch_size=2)


def _seed_default() -> int:
    env = os.environ.get("ENDOVID_SEED")
    return int(env) if env else 0


def _collect_overrides(args: argparse.Namespace) -> Dict[str, str]:
    """Dedicated flags plus --set pairs, as raw strings for the config layer."""
    overrides: Dict[str, str] = {}
    for pair in args.set or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, val = pair.partition("=")
        overrides[key.strip()] = val.strip()
    flag_map = {
        "disable_cv": ("distill.disable_cv", "true"),
        "disable_dm": ("distill.disable_dm", "true"),
        "local_spatial_only": ("views.local_spatial_only", "true"),
        "local_temporal_only": ("views.local_temporal_only", "true"),
    }
    for attr, (key, val) in flag_map.items():
        if getattr(args, attr, False):
            overrides[key] = val
    if getattr(args, "G", None) is not None:
        overrides["distill.n_global"] = str(args.G)
    if getattr(args, "L", None) is not None:
        overrides["distill.n_local"] = str(args.L)
    if getattr(args, "T_l", None):
        overrides["views.t_local"] = args.T_l
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = str(args.seed)
    if getattr(args, "out", None):
        overrides["data.out_dir"] = args.out
    if getattr(args, "data", None):
        overrides["data.dataset_dir"] = args.data
    if getattr(args, "steps", None) is not None:
        overrides["run.max_steps"] = str(args.steps)
    if getattr(args, "epochs", None) is not None:
        overrides["distill.epochs"] = str(args.epochs)
    return overrides


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    file_path = Path(args.config) if getattr(args, "config", None) else None
    overrides = _collect_overrides(args)
    # seed precedence: --seed flag, then config file, then ENDOVID_SEED, then 0
    if "run.seed" not in overrides:
        env = os.environ.get("ENDOVID_SEED")
        file_pairs = load_config_file(file_path) if file_path else {}
        if env and "run.seed" not in file_pairs:
            overrides["run.seed"] = env
    return build_config(file_path, overrides)


# -- pretrain -----------------------------------------------------------------

def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(cfg.data.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.cfg").write_text(dump_config(cfg))

    clips = load_dataset(Path(cfg.data.dataset_dir))
    resume = load_checkpoint(Path(args.resume)) if args.resume else None
    start = time.monotonic()

    def log(step, metrics):
        if cfg.run.log_every and step % cfg.run.log_every == 0:
            print(f"step {step}: total={metrics['loss_total']:.4f} "
                  f"cv={metrics['loss_cv']:.4f} dm={metrics['loss_dm']:.4f} "
                  f"H_t={metrics['teacher_entropy']:.3f} lr={metrics['lr']:.2e}")

    result = pretrain_run(
        clips, cfg.model, cfg.views, cfg.distill, out_dir,
        seed=cfg.run.seed, lr=cfg.run.lr, weight_decay=cfg.run.weight_decay,
        max_steps=cfg.run.max_steps or None,
        checkpoint_every=cfg.run.checkpoint_every,
        resume=resume, log_fn=log,
    )
    meta = {"steps": result.steps, "wall_clock_s": result.wall_clock_s,
            "final_checkpoint": str(result.final_checkpoint)}
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"finished {result.steps} steps in {result.wall_clock_s:.1f}s; "
          f"checkpoint at {result.final_checkpoint}")
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------

def _op_checks(rng: np.random.Generator) -> Dict[str, float]:
    """Finite-difference checks for each differentiable op class in isolation."""
    out: Dict[str, float] = {}

    def check(name, fn, shapes):
        params = {f"p{i}": Tensor(rng.standard_normal(s), requires_grad=True)
                  for i, s in enumerate(shapes)}
        out[name] = grad_check(fn, params, h=1e-6, samples_per_param=4,
                               rng=np.random.default_rng(7))

    def reduced(op):
        const_cache = {}

        def fn(p):
            v = op(p)
            if v.shape not in const_cache:
                const_cache[v.shape] = Tensor(np.random.default_rng(13).standard_normal(v.shape))
            return T.tsum(T.mul(v, const_cache[v.shape]))
        return fn

    check("matmul", reduced(lambda p: T.matmul(p["p0"], p["p1"])), [(3, 4), (4, 2)])
    check("softmax", reduced(lambda p: T.softmax_with_temperature(p["p0"], 0.07)), [(3, 5)])
    check("log_softmax", reduced(lambda p: T.log_softmax_with_temperature(p["p0"], 0.07)), [(3, 5)])
    check("layer_norm", reduced(lambda p: T.layer_norm(p["p0"], p["p1"], p["p2"])),
          [(3, 6), (6,), (6,)])
    check("gelu", reduced(lambda p: T.gelu(p["p0"])), [(3, 4)])
    check("l2_normalize", reduced(lambda p: T.l2_normalize(p["p0"])), [(3, 4)])
    check("add_mul_sum", lambda p: T.tsum(T.mul(T.add(p["p0"], p["p1"]), p["p0"])),
          [(3, 4), (4,)])
    return out


def tiny_total_loss_fn(seed: int = 0):
    """(loss function, float64 params) over the full objective at tiny scale.

    The teacher side uses an independent frozen parameter copy, matching the
    stop-gradient contract of training; its targets are constants of the loss.
    """
    model_cfg = ModelConfig(**TINY_MODEL)
    view_cfg = ViewConfig(**TINY_VIEWS)
    dcfg = DistillConfig(**TINY_DISTILL)
    rng = np.random.default_rng(seed)
    params = init_params(model_cfg, rng, dtype=np.float64)
    teacher = {k: Tensor(p.data.copy() + 0.01 * rng.standard_normal(p.data.shape))
               for k, p in params.items()}

    clip = synthesize_clip("gradcheck_clip", size=16, n_frames=8, motion_class="right",
                           rng=np.random.default_rng(seed + 1))
    g_views, l_views = sample_views_for_clip(clip, view_cfg, seed=seed, epoch=0,
                                             n_global=dcfg.n_global, n_local=dcfg.n_local)
    center = np.zeros(model_cfg.out_dim)
    teacher_probs = [teacher_distribution(model_forward(v.frames[None], teacher, model_cfg).data,
                                          center, dcfg.tau_teacher) for v in g_views]

    def loss_fn(p):
        student_g = [student_log_distribution(model_forward(v.frames[None], p, model_cfg),
                                              dcfg.tau_student) for v in g_views]
        student_l = [student_log_distribution(model_forward(v.frames[None], p, model_cfg),
                                              dcfg.tau_student) for v in l_views]
        cv, _ = cross_view_loss(teacher_probs, student_l)
        dm, _ = dynamic_motion_loss(teacher_probs, student_g)
        return T.add(cv, dm)

    return loss_fn, params


def cmd_gradcheck(args: argparse.Namespace) -> int:
    threshold = args.threshold
    rng = np.random.default_rng(args.seed if args.seed is not None else _seed_default())
    failures = []

    results = _op_checks(rng)
    loss_fn, params = tiny_total_loss_fn(seed=args.seed if args.seed is not None else _seed_default())
    try:
        results["total_loss"] = grad_check(loss_fn, params, h=1e-5,
                                           samples_per_param=args.samples,
                                           rng=np.random.default_rng(11))
    except GradCheckFailure as exc:
        print(f"FAIL total_loss: {exc}")
        return EXIT_FAILURE

    for name, err in results.items():
        ok = err < threshold
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e}")
        if not ok:
            failures.append(name)
    if failures:
        print(f"gradient check failed for: {', '.join(failures)}")
        return EXIT_FAILURE
    return EXIT_OK


# -- probe ---------------------------------------------------------------------

def cmd_probe(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    clips = load_dataset(Path(cfg.data.dataset_dir))
    seed = cfg.run.seed

    if args.checkpoint:
        ckpt = load_checkpoint(Path(args.checkpoint))
        model_cfg = ModelConfig.from_dict(ckpt.model_config)
        prefix = "teacher/" if args.use_teacher else "student/"
        params = {k[len(prefix):]: Tensor(v.copy()) for k, v in ckpt.arrays.items()
                  if k.startswith(prefix)}
    elif args.random_init:
        model_cfg = cfg.model
        state = init_distill_state(model_cfg, np.random.default_rng(np.random.SeedSequence([seed, 0xD157])))
        params = {k: Tensor(p.data.copy()) for k, p in state.student.items()}
    else:
        print("probe needs --checkpoint or --random-init", file=sys.stderr)
        return EXIT_USAGE

    report = run_probe(clips, params, model_cfg, cfg.probe, seed,
                       unfreeze=args.unfreeze)
    print(f"probe accuracy={report.accuracy:.4f} f1_binary={report.f1_binary:.4f} "
          f"f1_macro={report.f1_macro:.4f} (train {report.n_train}, test {report.n_test})")
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


# -- make-data -------------------------------------------------------------------

def cmd_make_data(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"refusing to write into non-empty {out_dir} (use --force)", file=sys.stderr)
        return EXIT_USAGE
    seed = args.seed if args.seed is not None else _seed_default()

    if args.slice_frames:
        # One long synthetic video (ping-ponging square), sliced into clips.
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
        frames = _bouncing_square(args.size, args.slice_frames, rng, args.fps)
        pieces = slice_video_to_clips(frames, args.fps, args.duration)
        clips = [VideoClip(f"clip_{i:04d}", piece, fps=args.fps) for i, piece in enumerate(pieces)]
        entries = [ManifestEntry(c.clip_id, c.clip_id, c.n_frames, c.fps, None) for c in clips]
        manifest = Manifest(dataset_name="sliced", seed=seed, entries=entries)
    else:
        classes = [c.strip() for c in args.classes.split(",") if c.strip()]
        manifest, clips = generate_synthetic_dataset(
            count=args.count, size=args.size, n_frames=args.frames,
            motion_classes=classes, seed=seed, fps=args.fps,
            shared_appearance=args.shared_appearance)

    save_dataset(out_dir, manifest, clips)
    hist: Dict[str, int] = {}
    for e in manifest.entries:
        hist[str(e.label)] = hist.get(str(e.label), 0) + 1
    print(f"wrote {len(clips)} clips to {out_dir}")
    print("class histogram: " + ", ".join(f"{k}={v}" for k, v in sorted(hist.items())))
    return EXIT_OK


def _bouncing_square(size: int, n_frames: int, rng: np.random.Generator,
                     fps: float) -> np.ndarray:
    square = max(4, size // 3)
    background = rng.uniform(0.0, 0.45, size=(3, size, size)).astype(np.float32)
    texture = rng.uniform(0.55, 1.0, size=(3, square, square)).astype(np.float32)
    y = int(rng.integers(0, size - square + 1))
    limit = size - square
    frames = np.empty((n_frames, 3, size, size), dtype=np.float32)
    x, v = 0, 1
    for t in range(n_frames):
        frame = background.copy()
        frame[:, y:y + square, x:x + square] = texture
        frames[t] = frame
        if x + v < 0 or x + v > limit:
            v = -v
        x += v
    return frames


# -- export-metrics ----------------------------------------------------------------

def cmd_export_metrics(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.is_file():
        print(f"no metrics CSV at {metrics_path}", file=sys.stderr)
        return EXIT_FAILURE
    with open(metrics_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print(f"metrics CSV {metrics_path} is empty", file=sys.stderr)
        return EXIT_FAILURE

    window = min(args.window, len(rows))
    totals = [float(r["loss_total"]) for r in rows]
    entropies = [float(r["teacher_entropy"]) for r in rows]
    meta_path = run_dir / "run_meta.json"
    wall = json.loads(meta_path.read_text())["wall_clock_s"] if meta_path.is_file() else None

    summary = {
        "steps": len(rows),
        "window": window,
        "first_window_loss_mean": float(np.mean(totals[:window])),
        "last_window_loss_mean": float(np.mean(totals[-window:])),
        "teacher_entropy_min": float(np.min(entropies)),
        "teacher_entropy_last": float(entropies[-1]),
        "wall_clock_s": wall,
    }
    out_path = run_dir / "summary.json"
    out_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (flat section.field = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field; repeatable")
    p.add_argument("--seed", type=int, default=None,
                   help="run seed (default: ENDOVID_SEED or 0)")
    p.add_argument("--data", help="dataset directory (overrides data.dataset_dir)")
    p.add_argument("--out", help="output directory (overrides data.out_dir)")


def _add_ablation_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--disable-cv", dest="disable_cv", action="store_true",
                   help="drop the cross-view term")
    p.add_argument("--disable-dm", dest="disable_dm", action="store_true",
                   help="drop the motion-matching term")
    p.add_argument("--local-spatial-only", dest="local_spatial_only", action="store_true",
                   help="local views vary only spatially")
    p.add_argument("--local-temporal-only", dest="local_temporal_only", action="store_true",
                   help="local views vary only temporally")
    p.add_argument("--G", type=int, default=None, help="number of global views")
    p.add_argument("--L", type=int, default=None, help="number of local views")
    p.add_argument("--T-l", dest="T_l", default=None,
                   help="comma-separated local frame-count set")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="endovid",
                                     description="Self-supervised video pre-training at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    _add_config_args(p)
    _add_ablation_args(p)
    p.add_argument("--steps", type=int, default=None, help="cap total steps")
    p.add_argument("--epochs", type=int, default=None, help="override epoch count")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=2,
                   help="coordinates sampled per parameter for the full-loss check")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("probe", help="linear probe on a frozen backbone")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="checkpoint with the pre-trained backbone")
    p.add_argument("--random-init", dest="random_init", action="store_true",
                   help="probe a randomly initialized backbone instead")
    p.add_argument("--use-teacher", dest="use_teacher", action="store_true",
                   help="probe the teacher weights instead of the student")
    p.add_argument("--unfreeze", action="store_true",
                   help="fine-tune the whole backbone instead of the frozen probe")
    p.add_argument("--report", help="write a JSON report here")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("make-data", help="generate a synthetic dataset on disk")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--classes", default="left,right")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--shared-appearance", dest="shared_appearance", action="store_true",
                   help="one texture/background for the whole dataset (motion-only identity)")
    p.add_argument("--slice-frames", dest="slice_frames", type=int, default=0,
                   help="slicing mode: total frames of one long video to cut up")
    p.add_argument("--duration", type=float, default=5.0,
                   help="slicing mode: clip duration in seconds")
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("export-metrics", help="summarize a run's metrics CSV")
    p.add_argument("run_dir")
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(fn=cmd_export_metrics)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
