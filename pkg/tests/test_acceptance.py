"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (5-7) run real pre-training jobs on synthetic data and
take minutes; the 500-step run is shared between the learning-signal and
transfer-signal checks.
"""

import itertools
import math
import time

import numpy as np
import pytest

import endovid.tensor as T
from endovid.tensor import Tensor
from endovid.cli import main, tiny_total_loss_fn, TINY_MODEL
from endovid.data import generate_synthetic_dataset, load_checkpoint
from endovid.distill import (DistillConfig, cross_view_loss, dynamic_motion_loss,
                             ema_update, init_distill_state, pretrain_run,
                             student_log_distribution, teacher_distribution)
from endovid.gradcheck import grad_check
from endovid.model import (ModelConfig, encoder_block_forward, init_params,
                           interpolate_spatial_encoding, interpolate_temporal_encoding,
                           model_forward, patchify_and_embed)
from endovid.probe import ProbeConfig, run_probe
from endovid.views import ViewConfig

# Desk-scale acceptance recipe: paper temperatures and centering, with the
# EMA momentum and learning rate rescaled so a few hundred steps show the
# dynamics a full-scale run spreads over thousands.
DESK_MODEL = ModelConfig()
DESK_VIEWS = ViewConfig()
DESK_LR = 1e-3
DESK_EMA = 0.9
RESULTS = []


def report(criterion: int, passed: bool, detail: str):
    line = f"ACCEPTANCE {criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    RESULTS.append(line)
    assert passed, line


@pytest.fixture(scope="module")
def dataset():
    _, clips = generate_synthetic_dataset(64, 32, 16, ["left", "right"], seed=11)
    return clips


@pytest.fixture(scope="module")
def learning_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "learn500"
    dcfg = DistillConfig(n_global=2, n_local=4, epochs=1000, batch_size=4,
                         ema_momentum=DESK_EMA)
    result = pretrain_run(dataset, DESK_MODEL, DESK_VIEWS, dcfg, out, seed=13,
                          lr=DESK_LR, max_steps=500)
    return result, out


def read_metrics(path):
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestCriterion1Gradients:
    def test_gradient_oracle_on_tiny_config(self):
        start = time.monotonic()
        loss_fn, params = tiny_total_loss_fn(seed=0)
        assert TINY_MODEL["depth"] == 4 and TINY_MODEL["embed_dim"] == 64
        assert TINY_MODEL["patch_size"] == 4 and TINY_MODEL["out_dim"] == 16
        err = grad_check(loss_fn, params, h=1e-5, samples_per_param=2,
                         rng=np.random.default_rng(11))
        elapsed = time.monotonic() - start
        report(1, err < 1e-4 and elapsed < 300,
               f"full-objective max relative error {err:.3e} (< 1e-4) in {elapsed:.0f}s")

    def test_gradcheck_command_exits_clean(self):
        assert main(["gradcheck", "--samples", "1", "--seed", "0"]) == 0


class TestCriterion2LossAlgebra:
    def test_pair_counts_and_entropy_floor(self):
        rng = np.random.default_rng(0)
        ok = True
        for g, l in itertools.product([1, 2, 3], range(5)):
            teacher = [teacher_distribution(rng.standard_normal((3, 8)), np.zeros(8), 0.04)
                       for _ in range(g)]
            locals_ = [student_log_distribution(
                Tensor(rng.standard_normal((3, 8))), 0.07) for _ in range(l)]
            _, cv_count = cross_view_loss(teacher, locals_)
            globals_ = [student_log_distribution(Tensor(rng.standard_normal((3, 8))), 0.07)
                        for _ in range(g)]
            _, dm_count = dynamic_motion_loss(teacher, globals_)
            ok = ok and cv_count == g * l and dm_count == g * (g - 1)

        # matched distributions: mean pair term equals the teacher entropy
        p_t = teacher_distribution(rng.standard_normal((4, 8)), np.zeros(8), 0.04)
        matched = student_log_distribution(Tensor(0.07 * np.log(p_t)), 0.07)
        loss, _ = cross_view_loss([p_t], [matched])
        expected = float(np.mean([-(row * np.log(row)).sum() for row in p_t]))
        gap = abs(loss.item() - expected)
        report(2, ok and gap < 1e-6,
               f"G*L and G*(G-1) counts hold; matched-pair term within {gap:.2e} of teacher entropy")


class TestCriterion3EmaAlgebra:
    def test_closed_form_exact_at_32bit(self):
        ok = True
        for alpha in (0.0, 0.5, 0.996, 1.0):
            state = init_distill_state(DESK_MODEL, np.random.default_rng(3))
            rng = np.random.default_rng(4)
            for p in state.student.values():
                p.data = rng.standard_normal(p.data.shape).astype(np.float32)
            expected = {k: alpha * state.teacher[k].data + (1.0 - alpha) * state.student[k].data
                        for k in state.student}
            ema_update(state, alpha)
            ok = ok and all(np.array_equal(state.teacher[k].data, expected[k])
                            for k in state.student)
        report(3, ok, "teacher update equals alpha*phi + (1-alpha)*theta exactly "
                      "(32-bit) for alpha in {0, 0.5, 0.996, 1}")


class TestCriterion4Architecture:
    def test_shape_attention_interpolation_tokens(self):
        cfg = DESK_MODEL
        params = init_params(cfg, np.random.default_rng(5))
        frames = np.random.default_rng(6).uniform(0, 1, (2, 4, 3, 32, 32)).astype(np.float32)

        grid = patchify_and_embed(frames, params, cfg)
        tokens_ok = grid.token_count() == 4 * (32 // 4) * (32 // 4) + 1

        out = encoder_block_forward(grid, params, 0, cfg)
        shape_ok = (out.patches.shape == grid.patches.shape
                    and out.cls.shape == grid.cls.shape)

        sink = []
        model_forward(frames, params, cfg, attn_sink=sink)
        rows_ok = all(np.abs(a.sum(axis=-1) - 1.0).max() < 1e-6 for a in sink)

        ident_t = interpolate_temporal_encoding(params["pos.temporal"], cfg.t_max)
        ident_s = interpolate_spatial_encoding(params["pos.spatial"], cfg,
                                               cfg.grid_h, cfg.grid_w)
        ident_ok = ident_t is params["pos.temporal"] and ident_s is params["pos.spatial"]

        report(4, tokens_ok and shape_ok and rows_ok and ident_ok,
               "blocks preserve (T, N+1, D); attention rows sum to 1 within 1e-6; "
               "native-resolution interpolation is exact identity; "
               "token count = T*(H/P)(W/P) + 1")


class TestCriterion5AntiCollapse:
    def test_paired_runs(self, dataset, tmp_path_factory):
        start = time.monotonic()
        base = tmp_path_factory.mktemp("collapse")
        ln_k = math.log(DESK_MODEL.out_dim)

        no_center = DistillConfig(tau_teacher=0.01, tau_student=0.07, centering=False,
                                  n_global=2, n_local=2, epochs=1000, batch_size=4)
        r1 = pretrain_run(dataset, DESK_MODEL, DESK_VIEWS, no_center,
                          base / "nocenter", seed=9, lr=DESK_LR, max_steps=200)
        h1 = [float(r["teacher_entropy"]) for r in read_metrics(r1.metrics_path)]

        centered = DistillConfig(tau_teacher=0.04, tau_student=0.07, centering=True,
                                 n_global=2, n_local=2, epochs=1000, batch_size=4)
        r2 = pretrain_run(dataset, DESK_MODEL, DESK_VIEWS, centered,
                          base / "centered", seed=9, lr=DESK_LR, max_steps=200)
        h2 = [float(r["teacher_entropy"]) for r in read_metrics(r2.metrics_path)]

        elapsed = time.monotonic() - start
        collapsed = min(h1) < 0.1 * ln_k
        healthy = min(h2) > 0.25 * ln_k
        report(5, collapsed and healthy and elapsed < 900,
               f"no-centering entropy min {min(h1):.3f} < {0.1 * ln_k:.3f}; "
               f"centered entropy min {min(h2):.3f} > {0.25 * ln_k:.3f} over all 200 steps "
               f"({elapsed:.0f}s)")


class TestCriterion6LearningSignal:
    def test_loss_descends(self, learning_run):
        result, _ = learning_run
        rows = read_metrics(result.metrics_path)
        totals = [float(r["loss_total"]) for r in rows]
        entropies = [float(r["teacher_entropy"]) for r in rows]
        first = float(np.mean(totals[:20]))
        last = float(np.mean(totals[-20:]))
        finite = all(math.isfinite(h) for h in entropies)
        report(6, len(rows) == 500 and last < first and finite
               and result.wall_clock_s < 1800,
               f"500 steps in {result.wall_clock_s:.0f}s; loss first20 {first:.4f} -> "
               f"last20 {last:.4f}; teacher entropy finite")


class TestCriterion7TransferSignal:
    def test_probe_beats_random_init(self, dataset, learning_run):
        result, _ = learning_run
        start = time.monotonic()
        ckpt = load_checkpoint(result.final_checkpoint)
        trained = {k[len("student/"):]: Tensor(v.copy())
                   for k, v in ckpt.arrays.items() if k.startswith("student/")}

        random_state = init_distill_state(DESK_MODEL, np.random.default_rng(
            np.random.SeedSequence([999, 0xD157])))
        random_params = {k: Tensor(p.data.copy()) for k, p in random_state.student.items()}

        probe_cfg = ProbeConfig()
        rep_trained = run_probe(dataset, trained, DESK_MODEL, probe_cfg, seed=5)
        rep_random = run_probe(dataset, random_params, DESK_MODEL, probe_cfg, seed=5)
        gain = 100.0 * (rep_trained.f1_macro - rep_random.f1_macro)
        elapsed = time.monotonic() - start
        report(7, gain >= 10.0 and elapsed < 1800,
               f"probe macro-F1 pre-trained {100 * rep_trained.f1_macro:.1f} vs random "
               f"{100 * rep_random.f1_macro:.1f} (+{gain:.1f} points, binary "
               f"{100 * rep_trained.f1_binary:.1f}/{100 * rep_random.f1_binary:.1f}) "
               f"in {elapsed:.0f}s")


class TestCriterion8Determinism:
    def test_identical_seeds_and_resume(self, dataset, tmp_path_factory):
        base = tmp_path_factory.mktemp("determinism")
        dcfg = DistillConfig(n_global=2, n_local=2, epochs=1000, batch_size=4,
                             ema_momentum=DESK_EMA)

        r1 = pretrain_run(dataset, DESK_MODEL, DESK_VIEWS, dcfg, base / "a", seed=21,
                          lr=DESK_LR, max_steps=8, checkpoint_every=4)
        r2 = pretrain_run(dataset, DESK_MODEL, DESK_VIEWS, dcfg, base / "b", seed=21,
                          lr=DESK_LR, max_steps=8)
        same_csv = (base / "a" / "metrics.csv").read_bytes() == \
                   (base / "b" / "metrics.csv").read_bytes()

        midpoint = load_checkpoint(base / "a" / "checkpoint_000004.ckpt")
        r3 = pretrain_run(dataset, DESK_MODEL, DESK_VIEWS, dcfg, base / "c", seed=21,
                          lr=DESK_LR, max_steps=8, resume=midpoint)
        tail_match = read_metrics(base / "a" / "metrics.csv")[4:] == \
            read_metrics(base / "c" / "metrics.csv")

        report(8, same_csv and tail_match,
               "identical seeds give identical metrics CSVs; midpoint resume "
               "reproduces the remaining metrics exactly")


class TestCriterion9AblationPlumbing:
    def test_all_axes_run_and_snapshot(self, tmp_path_factory):
        base = tmp_path_factory.mktemp("ablation")
        data = base / "ds"
        assert main(["make-data", "--out", str(data), "--count", "8", "--size", "16",
                     "--frames", "8", "--seed", "3"]) == 0
        tiny = ["--set", "model.embed_dim=16", "--set", "model.depth=1",
                "--set", "model.num_heads=2", "--set", "model.t_max=4",
                "--set", "model.h_max=16", "--set", "model.w_max=16",
                "--set", "model.head_hidden_dim=16", "--set", "model.head_bottleneck_dim=8",
                "--set", "model.out_dim=8", "--set", "model.mlp_ratio=2",
                "--set", "views.global_size=16", "--set", "views.local_size=8",
                "--set", "views.t_global=2,4", "--set", "views.t_local=2",
                "--set", "distill.batch_size=2", "--set", "run.log_every=0"]
        cases = {
            "dm_off": ["--disable-dm"],
            "cv_off": ["--disable-cv"],
            "spatial_only": ["--local-spatial-only"],
            "temporal_only": ["--local-temporal-only"],
            "views_override": ["--G", "1", "--L", "3", "--T-l", "2"],
        }
        ok = True
        for name, extra in cases.items():
            out = base / name
            code = main(["pretrain", "--data", str(data), "--out", str(out),
                         "--seed", "5", "--steps", "2", *tiny, *extra])
            ok = ok and code == 0
            snapshot = (out / "resolved_config.cfg").read_text()
            if name == "dm_off":
                ok = ok and "distill.disable_dm = true" in snapshot
                rows = read_metrics(out / "metrics.csv")
                ok = ok and all(float(r["loss_dm"]) == 0.0 for r in rows)
            if name == "cv_off":
                rows = read_metrics(out / "metrics.csv")
                ok = ok and all(float(r["loss_cv"]) == 0.0 for r in rows)
            if name == "spatial_only":
                ok = ok and "views.local_spatial_only = true" in snapshot
            if name == "temporal_only":
                ok = ok and "views.local_temporal_only = true" in snapshot
            if name == "views_override":
                ok = ok and "distill.n_global = 1" in snapshot
                ok = ok and "distill.n_local = 3" in snapshot
                ok = ok and "views.t_local = 2" in snapshot
        report(9, ok, "all ablation axes run to completion and land in the "
                      "resolved-config snapshot")
