"""End-to-end acceptance criteria, one test per criterion.

Each test writes a PASS/FAIL line (shown in the terminal summary) whatever
way it exits. Training runs are cached per session so criteria that share a
run do not repeat it; every criterion still counts the full time of the runs
it relies on toward its budget.
"""

import functools
import statistics
import time

import numpy as np
import pytest

from conftest import analytic_vs_numeric, rel_err, t64
from oracles import bdm_loops, confusion_roc
from scenarios import detection_scene, iou_pair, toy_roc
from verdicts import criterion
from ddnet import bdm, cli, io, networks, spatial, synth, temporal, training
from ddnet.metrics import iou_counts, miou, pd_fa, roc_auc
from ddnet.tensor import ConvSpec, avg_pool2, conv2d, l2_normalize_rows, max_pool2

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
LR = 5e-3
BENCH_MODEL = dict(channels=(4, 8, 16), stages=1)


def schedule(epochs, seed, batch_size=8):
    half, three_q = epochs // 2, (3 * epochs) // 4
    return training.TrainConfig(epochs=epochs, batch_size=batch_size, base_lr=LR,
                                lr_milestones=tuple(sorted({half, three_q})), seed=seed)


# ---------------------------------------------------------------------------
# shared benchmarks
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def single_frame_data():
    """640 synthetic 64x64 scenes, seed-fixed 512/128 split."""
    x, y = synth.single_frame_arrays(synth.SceneSpec(height=64, width=64), 640, 123)
    tr, te = synth.split_indices(640, 123)
    return training.ArrayDataset(x[tr], y[tr]), training.ArrayDataset(x[te], y[te])


@functools.lru_cache(maxsize=None)
def single_frame_run(seed, use_sd2m=True, orthogonal=False, epochs=8):
    """(test mIoU, mean seconds per epoch, total seconds) for one tiny SD2Net run."""
    train_set, test_set = single_frame_data()
    cfg = networks.ModelConfig(**BENCH_MODEL, use_sd2m=use_sd2m, orthogonal=orthogonal)
    t0 = time.perf_counter()
    res = training.train("sd2net", train_set, schedule(epochs, seed), cfg)
    score = training.evaluate_miou("sd2net", res.params, cfg, test_set)
    return score, statistics.mean(r.seconds for r in res.log), time.perf_counter() - t0


SEQ_SPEC = synth.SceneSpec(height=32, width=32, targets=(1, 2), distractors=(2, 3), flicker_amplitude=0.05)


@functools.lru_cache(maxsize=None)
def sequence_data():
    """200 five-frame clips with flicker and static distractors; 160/40 split."""
    clips = [synth.gen_sequence(SEQ_SPEC, 99, i) for i in range(200)]
    frames = np.stack([c.frames for c in clips]).astype(np.float32)
    masks = np.stack([c.masks for c in clips]).astype(np.float32)
    tr, te = synth.split_indices(200, 99)
    return frames, masks, tr, te


@functools.lru_cache(maxsize=None)
def temporal_run(kind, seed, epochs=12):
    frames, masks, tr, te = sequence_data()
    h, w = frames.shape[-2:]
    if kind == "std2net":
        train_set = training.ArrayDataset(frames[tr], masks[tr][:, -1])
        test_set = training.ArrayDataset(frames[te], masks[te][:, -1])
    else:
        # the per-frame baseline trains on every labelled frame and is scored on the current ones
        train_set = training.ArrayDataset(frames[tr].reshape(-1, 1, h, w), masks[tr].reshape(-1, 1, h, w))
        test_set = training.ArrayDataset(frames[te][:, -1], masks[te][:, -1])
    cfg = networks.ModelConfig(**BENCH_MODEL, temporal_window=frames.shape[1])
    t0 = time.perf_counter()
    res = training.train(kind, train_set, schedule(epochs, seed), cfg)
    return training.evaluate_miou(kind, res.params, cfg, test_set), time.perf_counter() - t0


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_c1_bdm_matches_loop_oracle():
    with criterion(1, "bdm_forward vs quadruple-loop oracle", budget=5) as note:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(20):
            B, G, c, F = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 65)
            t, p = rng.normal(size=(B, G, 1, F)), rng.normal(size=(B, G, c, F))
            worst = max(worst, rel_err(bdm.bdm_forward(t64(t), t64(p)).data, bdm_loops(t, p)))
        note["detail"] = f"max rel err {worst:.1e}"
        assert worst <= 1e-6


def test_c2_complete_basis_reconstructs():
    with criterion(2, "complete orthonormal basis reconstructs T") as note:
        rng = np.random.default_rng(7)
        q, _ = np.linalg.qr(rng.normal(size=(32, 32)))
        t = rng.normal(size=(2, 3, 1, 32))
        p = np.broadcast_to(q.T, (2, 3, 32, 32)).copy()
        err = float(np.abs(bdm.bdm_forward(t64(t), t64(p)).data - t).max())
        note["detail"] = f"max abs err {err:.1e}"
        assert err <= 1e-5


def _grad_cases():
    def conv(r):
        spec = ConvSpec(padding="replicate", dilation=2)
        return (lambda x, k, b: conv2d(x, k, b, spec)), [r.uniform(-1, 1, (2, 2, 6, 6)), r.uniform(-1, 1, (3, 2, 3, 3)),
                                                        r.uniform(-1, 1, 3)]

    def conv_strided(r):
        return (lambda x, k: conv2d(x, k, None, ConvSpec(stride=2))), [r.uniform(-1, 1, (1, 2, 6, 6)),
                                                                       r.uniform(-1, 1, (2, 2, 3, 3))]

    def tiny_sd2net(r):
        cfg = networks.ModelConfig(channels=(3, 6), stages=1)
        params = networks.init_params(cfg, int(r.integers(1 << 30)), dtype=np.float64)
        names = ["sd2net.stem.w", "sd2net.u0.enc0.sd2m.w", "sd2net.u0.down1.sd3m.w", "sd2net.u0.dec0.conv.w",
                 "sd2net.head.w", "sd2net.head.b"]

        def fn(x, *leaves):
            tree = dict(params)
            tree.update(zip(names, leaves))
            return networks.sd2net_forward(x, tree, cfg)[0]
        return fn, [r.uniform(0, 1, (1, 1, 8, 8))] + [params[n].data.copy() for n in names]

    def soft_iou(r):
        gt = (r.uniform(size=(2, 1, 4, 4)) > 0.6).astype(float)
        return (lambda p: training.soft_iou_loss(p, gt)), [r.uniform(0.05, 0.95, (2, 1, 4, 4))]

    return {
        "conv2d": conv,
        "conv2d-stride2": conv_strided,
        "max_pool2": lambda r: (max_pool2, [r.uniform(-1, 1, (2, 2, 4, 6))]),
        "avg_pool2": lambda r: (avg_pool2, [r.uniform(-1, 1, (2, 2, 4, 6))]),
        "l2_normalize_rows": lambda r: ((lambda p: l2_normalize_rows(p, 1e-8)), [r.uniform(-1, 1, (2, 3, 7))]),
        "bdm_forward": lambda r: (bdm.bdm_forward, [r.uniform(-1, 1, (2, 2, 1, 9)), r.uniform(-1, 1, (2, 2, 4, 9))]),
        "sd2m": lambda r: (spatial.sd2m, [r.uniform(-1, 1, (1, 2, 6, 6)), r.uniform(-1, 1, (2, 2, 1, 1))]),
        "sd3m": lambda r: (spatial.sd3m, [r.uniform(-1, 1, (1, 2, 6, 6)), r.uniform(-1, 1, (2, 2, 1, 1))]),
        "td2m": lambda r: ((lambda a, b, c, w: temporal.td2m([a, b, c], w)),
                           [r.uniform(-1, 1, (1, 2, 4, 4)) for _ in range(3)] + [r.uniform(-1, 1, (2, 6, 1, 1))]),
        "soft_iou_loss": soft_iou,
        "sd2net-tiny": tiny_sd2net,
    }


def test_c3_gradient_suite():
    with criterion(3, "analytic vs central-difference gradients", budget=120) as note:
        worst, skipped = {}, 0
        for name, make in _grad_cases().items():
            used, seed = 0, 0
            while used < 5:
                fn, inputs = make(np.random.default_rng(seed))
                gap, kinked = analytic_vs_numeric(fn, inputs, seed, kink_check=True)
                seed += 1
                if kinked:
                    skipped += 1
                    assert seed < 20, f"{name}: too many kinked draws"
                    continue
                worst[name] = max(worst.get(name, 0.0), gap)
                used += 1
        top = max(worst, key=worst.get)
        note["detail"] = f"{len(worst)} ops x 5 seeds ({skipped} kinked draws replaced), worst {top} {worst[top]:.1e}"
        assert all(v <= 1e-4 for v in worst.values()), worst


def _flip_basis(p, row):
    q = p.copy()
    q[:, :, row] *= -1
    return q


def test_c4_invariance_suite():
    with criterion(4, "offset, scale, rotation and sign-flip invariances", budget=30) as note:
        rng = np.random.default_rng(4)
        x = rng.uniform(size=(2, 3, 12, 12))
        errs = {}
        errs["offset"] = max(float(np.abs(spatial.dfem(t64(x)).data - spatial.dfem(t64(x + c)).data).max())
                             for c in (-3.0, 0.25, 10.0))
        base = l2_normalize_rows(spatial.dfem(t64(x))).data
        errs["scale"] = max(float(np.abs(l2_normalize_rows(spatial.dfem(t64(a * x))).data - base).max())
                            for a in (0.5, 2.0, 10.0))
        w = rng.normal(size=(3, 3, 1, 1))
        errs["rotation"] = max(
            float(np.abs(spatial.sd2m(t64(np.rot90(x, k, axes=(2, 3)).copy()), t64(w)).data
                         - np.rot90(spatial.sd2m(t64(x), t64(w)).data, k, axes=(2, 3))).max())
            for k in (1, 2, 3))

        flips = []
        t = spatial.fem_1x1(t64(x), t64(w))
        p = spatial.dfem(t64(x)).data
        ref = spatial.sd2m(t64(x), t64(w)).data.reshape(t.shape)
        flips += [np.abs(bdm.bdm_forward(t, t64(_flip_basis(p, r))).data - ref).max() for r in (0, 5, 13)]

        t = spatial.fem_1x1(avg_pool2(t64(x)), t64(w))
        p = spatial.dfed(t64(x)).data
        ref = spatial.sd3m(t64(x), t64(w)).data.reshape(t.shape)
        flips += [np.abs(bdm.bdm_forward(t, t64(_flip_basis(p, r))).data - ref).max() for r in range(4)]

        frames = [t64(rng.uniform(size=(2, 3, 6, 6))) for _ in range(4)]
        wt = rng.normal(size=(3, 12, 1, 1))
        t = spatial.fem_1x1(t64(np.concatenate([f.data for f in frames], axis=1)), t64(wt))
        p = temporal.tfem(frames).data
        ref = temporal.td2m(frames, t64(wt)).data.reshape(t.shape)
        flips += [np.abs(bdm.bdm_forward(t, t64(_flip_basis(p, r))).data - ref).max() for r in range(4)]
        errs["sign-flip"] = float(max(flips))

        note["detail"] = " ".join(f"{k} {v:.1e}" for k, v in errs.items())
        assert errs["offset"] <= 1e-6 and errs["scale"] <= 1e-6
        assert errs["rotation"] <= 1e-5 and errs["sign-flip"] <= 1e-6


@pytest.mark.slow
def test_c5_orthogonality_ablation():
    with criterion(5, "normalized vs orthogonalized bases", budget=30 * 60) as note:
        norm_miou, norm_epoch, norm_total = single_frame_run(0)
        orth_miou, orth_epoch, orth_total = single_frame_run(0, orthogonal=True)
        note["extra_seconds"] = norm_total + orth_total
        note["detail"] = (f"mIoU {norm_miou:.3f} vs {orth_miou:.3f}; "
                          f"epoch {norm_epoch:.1f}s vs {orth_epoch:.1f}s")
        assert norm_miou >= orth_miou - 0.02
        assert norm_epoch < orth_epoch


@pytest.mark.slow
def test_c6_sd2m_ablation():
    with criterion(6, "SD2M on vs off, median of 3 seeds", budget=45 * 60) as note:
        on = [single_frame_run(s) for s in SEEDS]
        off = [single_frame_run(s, use_sd2m=False) for s in SEEDS]
        note["extra_seconds"] = sum(r[2] for r in on + off)
        med_on, med_off = statistics.median(r[0] for r in on), statistics.median(r[0] for r in off)
        note["detail"] = f"median mIoU {med_on:.3f} vs {med_off:.3f}"
        assert med_on >= med_off + 0.01


@pytest.mark.slow
def test_c7_temporal_trend():
    with criterion(7, "STD2Net vs per-frame SD2Net, median of 3 seeds", budget=60 * 60) as note:
        multi = [temporal_run("std2net", s) for s in SEEDS]
        single = [temporal_run("sd2net", s) for s in SEEDS]
        note["extra_seconds"] = sum(r[1] for r in multi + single)
        med_multi, med_single = statistics.median(r[0] for r in multi), statistics.median(r[0] for r in single)
        note["detail"] = f"median mIoU {med_multi:.3f} vs {med_single:.3f}"
        assert med_multi >= med_single + 0.02


def test_c8_overfit_eight_samples():
    with criterion(8, "tiny SD2Net memorizes 8 samples", budget=5 * 60) as note:
        x, y = synth.single_frame_arrays(synth.SceneSpec(height=32, width=32), 8, 5)
        cfg = networks.ModelConfig(**BENCH_MODEL)
        tc = training.TrainConfig(epochs=200, batch_size=8, base_lr=LR, lr_milestones=(), seed=0)
        res = training.train("sd2net", training.ArrayDataset(x, y), tc, cfg)
        losses = [r.loss for r in res.log]
        note["detail"] = f"loss {losses[0]:.3f} -> {losses[-1]:.3f}"
        assert losses[-1] < 0.1
        assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_c9_metric_oracles():
    with criterion(9, "mIoU, Pd/Fa and ROC AUC on hand scenarios") as note:
        preds, gts, want = iou_pair()
        assert iou_counts(preds, gts) == (4, 10) and miou(preds, gts) == want
        preds, gts, pd, fa = detection_scene()
        assert pd_fa(preds, gts) == (pd, fa)
        probs, gts, th = toy_roc()
        pts, auc = roc_auc(probs, gts, th)
        oracle = [(0.0, 0.0)] + sorted(confusion_roc(probs, gts, th)) + [(1.0, 1.0)]
        manual = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(oracle, oracle[1:]))
        note["detail"] = f"auc {auc:.6f}"
        assert pts == oracle and abs(auc - manual) <= 1e-9


def test_c10_round_trips_and_check_all(tmp_path, capsys):
    with criterion(10, "file round-trips and `ddnet check all`") as note:
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        io.write_tensor(tmp_path / "x.ddn", x)
        assert io.read_tensor(tmp_path / "x.ddn").tobytes() == x.tobytes()
        g = rng.normal(size=(3, 4))
        assert io.decode_tensor(io.encode_tensor(g)).tobytes() == g.tobytes()

        img = rng.uniform(size=(9, 7))
        io.write_pgm(tmp_path / "i.pgm", img)
        assert np.abs(io.read_pgm(tmp_path / "i.pgm") - img).max() <= 1 / 131070
        io.write_pgm(tmp_path / "h.pgm", np.full((4, 4), 0.5), maxval=255)
        assert set(np.round(io.read_pgm(tmp_path / "h.pgm").ravel() * 255).astype(int)) <= {127, 128}

        cfg = networks.ModelConfig(channels=(4, 8), stages=1)
        params = networks.init_params(cfg, 3)
        grads = {k: rng.normal(size=t.shape).astype(np.float32) for k, t in params.items()}
        params, adam = training.adam_step(params, grads, training.AdamState(), 1e-3)
        io.save_checkpoint(tmp_path / "a.ckpt", params, cfg, adam)
        ck = io.load_checkpoint(tmp_path / "a.ckpt", cfg)
        io.save_checkpoint(tmp_path / "b.ckpt", ck.params, ck.config, ck.adam)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

        code = cli.main(["check", "all"])
        out = capsys.readouterr().out
        note["detail"] = out.strip().splitlines()[-1]
        assert code == 0 and "FAIL" not in out
