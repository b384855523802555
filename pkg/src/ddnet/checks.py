"""User-runnable property suites (``ddnet check <suite>``).

Each check returns ``(ok, detail)``; suites are lists of named checks. These
are quick self-diagnostics on random inputs; the pytest suite holds the
independent oracles.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import bdm, io, metrics, networks, spatial, temporal, training
from .tensor import (
    ConvSpec,
    Tensor,
    avg_pool2,
    backward,
    batched_matmul,
    conv2d,
    finite_diff_grad,
    l2_normalize_rows,
    max_pool2,
    total,
    mul,
)

Check = Callable[[], Tuple[bool, str]]
GRAD_TOL = 1e-4


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _t(a, grad=False) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def grad_check(fn: Callable[..., Tensor], inputs: List[np.ndarray], seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients of
    ``sum(fn(*inputs) * r)`` for a fixed random weighting ``r``."""
    ts = [_t(x, True) for x in inputs]
    out = fn(*ts)
    r = _rng(seed + 1000).uniform(-1, 1, size=out.shape)
    loss = total(mul(out, _t(r))) if out.ndim else out
    backward(loss)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = [_t(a) for a in inputs]
            args[i] = _t(v)
            o = fn(*args)
            return float((o.data * r).sum()) if o.ndim else float(o.data)
        num = finite_diff_grad(f, np.asarray(x, dtype=np.float64))
        ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(ana, num))
    return worst


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def _tensor_checks() -> Dict[str, Check]:
    def laplacian():
        x = _t(np.arange(1, 10).reshape(1, 1, 3, 3))
        k = _t(np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]]).reshape(1, 1, 3, 3))
        y = conv2d(x, k).data[0, 0]
        return y[1, 1] == 0.0, f"centre={y[1, 1]}"

    def zero_sum_constant():
        x = _t(np.full((1, 2, 7, 7), 3.25))
        k = _rng(1).normal(size=(2, 1, 3, 3))
        k -= k.mean(axis=(2, 3), keepdims=True)
        y = conv2d(x, _t(k), spec=ConvSpec(padding="replicate", depthwise=True, dilation=2))
        return float(np.abs(y.data).max()) <= 1e-12, f"max={np.abs(y.data).max():.2e}"

    def pool_rotation():
        x = _rng(2).normal(size=(2, 3, 6, 6))
        errs = [np.abs(op(_t(np.rot90(x, axes=(2, 3)).copy())).data - np.rot90(op(_t(x)).data, axes=(2, 3))).max()
                for op in (max_pool2, avg_pool2)]
        return max(errs) == 0.0, f"max={max(errs):.2e}"

    def matmul_identity():
        b = _rng(3).normal(size=(2, 2, 5))
        y = batched_matmul(_t(np.broadcast_to(np.eye(2), (2, 2, 2)).copy()), _t(b)).data
        return np.array_equal(y, b), "I*B == B"

    def normalize_zero_row():
        y = l2_normalize_rows(_t(np.array([[3.0, 4.0], [0.0, 0.0]])), 1e-8).data
        ok = np.allclose(y[0], [0.6, 0.8], atol=1e-7) and np.all(y[1] == 0)
        return ok, f"rows={y.tolist()}"

    return {"conv-laplacian": laplacian, "zero-sum-constant": zero_sum_constant,
            "pool-rotation": pool_rotation, "matmul-identity": matmul_identity,
            "normalize-zero-row": normalize_zero_row}


def _grad_checks(seeds=(0, 1, 2, 3, 4)) -> Dict[str, Check]:
    def over_seeds(make):
        def run():
            worst = 0.0
            for s in seeds:
                fn, inputs = make(_rng(s))
                worst = max(worst, grad_check(fn, inputs, s))
            return worst <= GRAD_TOL, f"max rel err {worst:.2e} over {len(seeds)} seeds"
        return run

    def conv(rng):
        spec = ConvSpec(padding="replicate", dilation=2)
        return (lambda x, k, b: conv2d(x, k, b, spec)), [rng.uniform(-1, 1, (2, 2, 6, 6)),
                                                        rng.uniform(-1, 1, (3, 2, 3, 3)), rng.uniform(-1, 1, 3)]

    def conv_s2(rng):
        spec = ConvSpec(stride=2)
        return (lambda x, k: conv2d(x, k, None, spec)), [rng.uniform(-1, 1, (1, 2, 6, 6)),
                                                        rng.uniform(-1, 1, (2, 2, 3, 3))]

    def pools(rng):
        return (lambda x: max_pool2(x) * 2.0 + avg_pool2(x)), [rng.uniform(-1, 1, (2, 2, 4, 6))]

    def l2n(rng):
        return (lambda p: l2_normalize_rows(p, 1e-8)), [rng.uniform(-1, 1, (2, 3, 7))]

    def bdmf(rng):
        return (lambda t, p: bdm.bdm_forward(t, p)), [rng.uniform(-1, 1, (2, 2, 1, 9)), rng.uniform(-1, 1, (2, 2, 4, 9))]

    def bdm_orth(rng):
        return (lambda t, p: bdm.bdm_forward(t, p, orthogonal=True)), [rng.uniform(-1, 1, (1, 2, 1, 9)),
                                                                       rng.uniform(-1, 1, (1, 2, 4, 9))]

    def sd2m_(rng):
        return (lambda x, w: spatial.sd2m(x, w)), [rng.uniform(-1, 1, (1, 2, 6, 6)), rng.uniform(-1, 1, (2, 2, 1, 1))]

    def sd3m_(rng):
        return (lambda x, w: spatial.sd3m(x, w)), [rng.uniform(-1, 1, (1, 2, 6, 6)), rng.uniform(-1, 1, (2, 2, 1, 1))]

    def inception(rng):
        return (lambda x, w: spatial.inception_pool(x, w)), [rng.uniform(-1, 1, (1, 4, 4, 4)),
                                                             rng.uniform(-1, 1, (1, 1, 1, 1))]

    def td2m_(rng):
        def fn(a, b, c, w):
            return temporal.td2m([a, b, c], w)
        return fn, [rng.uniform(-1, 1, (1, 2, 4, 4)) for _ in range(3)] + [rng.uniform(-1, 1, (2, 6, 1, 1))]

    def soft_iou(rng):
        g = (rng.uniform(size=(2, 1, 4, 4)) > 0.6).astype(float)
        return (lambda p: training.soft_iou_loss(p, g)), [rng.uniform(0.05, 0.95, (2, 1, 4, 4))]

    def tiny_net(rng):
        cfg = networks.ModelConfig(channels=(3, 4), stages=1)
        params = networks.init_params(cfg, int(rng.integers(1 << 30)), dtype=np.float64)
        names = ["sd2net.stem.w", "sd2net.u0.enc0.sd2m.w", "sd2net.u0.down1.sd3m.w", "sd2net.head.w"]

        def fn(x, *ws):
            p = dict(params)
            for n, w in zip(names, ws):
                p[n] = w
            return networks.sd2net_forward(x, p, cfg)[0]
        return fn, [rng.uniform(0, 1, (1, 1, 4, 4))] + [params[n].data.copy() for n in names]

    makers = {"conv2d": conv, "conv2d-stride2": conv_s2, "pools": pools, "l2_normalize_rows": l2n,
              "bdm_forward": bdmf, "bdm_forward-orthogonal": bdm_orth, "sd2m": sd2m_, "sd3m": sd3m_,
              "inception_pool": inception, "td2m": td2m_, "soft_iou_loss": soft_iou, "sd2net-tiny": tiny_net}
    return {f"grad-{k}": over_seeds(v) for k, v in makers.items()}


def _bdm_checks() -> Dict[str, Check]:
    rng = _rng(11)

    def completeness():
        q, _ = np.linalg.qr(rng.normal(size=(32, 32)))
        t = rng.normal(size=(1, 1, 1, 32))
        o = bdm.bdm_forward(_t(t), _t(q.T[None, None])).data
        err = float(np.abs(o - t).max())
        return err <= 1e-5, f"max abs err {err:.2e}"

    def sign_flip():
        t, p = rng.normal(size=(2, 3, 1, 10)), rng.normal(size=(2, 3, 4, 10))
        q = p.copy()
        q[:, :, 2] *= -1
        err = float(np.abs(bdm.bdm_forward(_t(t), _t(p)).data - bdm.bdm_forward(_t(t), _t(q)).data).max())
        return err <= 1e-6, f"max abs err {err:.2e}"

    def homogeneity():
        t, p = rng.normal(size=(1, 2, 1, 8)), rng.normal(size=(1, 2, 3, 8))
        base = bdm.bdm_forward(_t(t), _t(p)).data
        err = max(float(np.abs(bdm.bdm_forward(_t(a * t), _t(p)).data - a * base).max()) for a in (-2, 0.5, 3))
        return err <= 1e-6, f"max abs err {err:.2e}"

    def idempotence():
        t, p = rng.normal(size=(1, 2, 1, 8)), rng.normal(size=(1, 2, 3, 8))
        basis = bdm.orthonormalize_basis(_t(p))
        once = bdm.project(_t(t), basis)
        err = float(np.abs(bdm.project(once, basis).data - once.data).max())
        return err <= 1e-6, f"max abs err {err:.2e}"

    return {"bdm-completeness": completeness, "bdm-sign-flip": sign_flip,
            "bdm-homogeneity": homogeneity, "bdm-idempotence": idempotence}


def _spatial_checks() -> Dict[str, Check]:
    rng = _rng(21)

    def offset():
        x = rng.uniform(size=(1, 2, 8, 8))
        err = float(np.abs(spatial.dfem(_t(x)).data - spatial.dfem(_t(x + 5.0)).data).max())
        return err <= 1e-6, f"max abs err {err:.2e}"

    def scale():
        x = rng.uniform(size=(1, 2, 8, 8))
        base = l2_normalize_rows(spatial.dfem(_t(x))).data
        err = max(float(np.abs(l2_normalize_rows(spatial.dfem(_t(a * x))).data - base).max()) for a in (0.5, 2, 10))
        return err <= 1e-6, f"max abs err {err:.2e}"

    def rotation():
        x, w = rng.normal(size=(1, 3, 9, 9)), rng.normal(size=(3, 3, 1, 1))
        a = spatial.sd2m(_t(np.rot90(x, axes=(2, 3)).copy()), _t(w)).data
        b = np.rot90(spatial.sd2m(_t(x), _t(w)).data, axes=(2, 3))
        err = float(np.abs(a - b).max())
        return err <= 1e-5, f"max abs err {err:.2e}"

    def sd3m_flip():
        x, w = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(2, 2, 1, 1))
        t = spatial.fem_1x1(avg_pool2(_t(x)), _t(w))
        p = spatial.dfed(_t(x)).data.copy()
        q = p.copy()
        q[:, :, 2] *= -1
        err = float(np.abs(bdm.bdm_forward(t, _t(p)).data - bdm.bdm_forward(t, _t(q)).data).max())
        return err <= 1e-6, f"max abs err {err:.2e}"

    def inception_route():
        x = rng.normal(size=(1, 8, 4, 4))
        y = spatial.inception_pool(_t(x), _t(rng.normal(size=(2, 2, 1, 1)))).data
        return np.array_equal(y[:, :3], max_pool2(_t(x[:, :3])).data), "first group == max_pool2"

    return {"dfem-offset": offset, "dfem-scale": scale, "sd2m-rotation": rotation,
            "sd3m-sign-flip": sd3m_flip, "inception-routing": inception_route}


def _temporal_checks() -> Dict[str, Check]:
    rng = _rng(31)

    def static():
        f = rng.normal(size=(1, 2, 4, 4))
        p = temporal.tfem([_t(f)] * 3).data
        return np.all(p[:, :, :2] == 0) and np.array_equal(p[:, :, 2], f.reshape(1, 2, 16)), "static stack"

    def shift():
        fr = [rng.normal(size=(1, 2, 4, 4)) for _ in range(4)]
        d = rng.normal(size=(1, 2, 4, 4))
        a = temporal.tfem([_t(f) for f in fr]).data
        b = temporal.tfem([_t(f + d) for f in fr]).data
        err = float(np.abs(a[:, :, :3] - b[:, :, :3]).max())
        return err <= 1e-12, f"difference bases max abs err {err:.2e}"

    def sign_flip():
        fr = [rng.normal(size=(1, 2, 4, 4)) for _ in range(5)]
        w = rng.normal(size=(2, 10, 1, 1))
        t = spatial.fem_1x1(_t(np.concatenate(fr, axis=1)), _t(w))
        p = temporal.tfem([_t(f) for f in fr]).data
        q = p.copy()
        q[:, :, 1] *= -1
        err = float(np.abs(bdm.bdm_forward(t, _t(p)).data - bdm.bdm_forward(t, _t(q)).data).max())
        return err <= 1e-6, f"max abs err {err:.2e}"

    def permute():
        fr = [rng.normal(size=(1, 2, 4, 4)) for _ in range(5)]
        w = rng.normal(size=(2, 10, 1, 1))
        order = [1, 0, 2, 3, 4]
        a = temporal.td2m([_t(f) for f in fr], _t(w)).data
        b = temporal.td2m([_t(fr[i]) for i in order], _t(temporal.permute_td2m_weight(w, order, 2))).data
        err = float(np.abs(a - b).max())
        return err <= 1e-6, f"max abs err {err:.2e}"

    return {"tfem-static": static, "tfem-shift": shift, "td2m-sign-flip": sign_flip, "td2m-permute": permute}


def _metrics_checks() -> Dict[str, Check]:
    def miou_fixture():
        p1 = np.zeros((1, 9), bool); g1 = np.zeros((1, 9), bool)
        p1[0, :5] = True; g1[0, 2:6] = True  # inter 3, union 6
        p2 = np.zeros((1, 4), bool); g2 = np.zeros((1, 4), bool)
        p2[0, :2] = True; g2[0, 1:4] = True  # inter 1, union 4
        v = metrics.miou([p1, p2], [g1, g2])
        return v == 0.4, f"miou={v}"

    def pdfa_fixture():
        g = np.zeros((64, 64), np.uint8); p = np.zeros((64, 64), np.uint8)
        g[9:12, 10] = 1; g[10, 9:12] = 1
        p[11:14, 12] = 1; p[12, 11:14] = 1
        p[40:42, 40:42] = 1
        pd, fa = metrics.pd_fa([p], [g])
        return pd == 1.0 and fa == 4 / 4096, f"pd={pd} fa={fa}"

    def auc_cases():
        g = (np.arange(16).reshape(4, 4) % 3 == 0).astype(float)
        _, a1 = metrics.roc_auc([g], [g], metrics.DEFAULT_THRESHOLDS)
        _, a2 = metrics.roc_auc([np.full((4, 4), 0.5)], [g], metrics.DEFAULT_THRESHOLDS)
        return abs(a1 - 1) <= 1e-9 and abs(a2 - 0.5) <= 1e-9, f"auc oracle={a1} constant={a2}"

    return {"miou-fixture": miou_fixture, "pd-fa-fixture": pdfa_fixture, "auc-cases": auc_cases}


def _io_checks() -> Dict[str, Check]:
    rng = _rng(41)

    def tensor_rt():
        with tempfile.TemporaryDirectory() as d:
            ok = True
            for dt in (np.float32, np.float64):
                x = rng.normal(size=(2, 3, 4, 5)).astype(dt)
                io.write_tensor(Path(d) / "t.ddn", x)
                y = io.read_tensor(Path(d) / "t.ddn")
                ok &= y.dtype == x.dtype and x.tobytes() == y.tobytes()
        return ok, "f32/f64 bitwise"

    def truncated():
        blob = io.encode_tensor(np.zeros((3, 4), np.float32))[:-5]
        try:
            io.decode_tensor(blob)
        except io.TruncatedError as e:
            return e.expected == 48 and e.actual == 43, str(e)
        return False, "no error raised"

    def pgm_rt():
        with tempfile.TemporaryDirectory() as d:
            x = rng.uniform(size=(7, 9))
            io.write_pgm(Path(d) / "a.pgm", x, 65535)
            e16 = float(np.abs(io.read_pgm(Path(d) / "a.pgm") - x).max())
            io.write_pgm(Path(d) / "b.pgm", x, 255)
            e8 = float(np.abs(io.read_pgm(Path(d) / "b.pgm") - x).max())
        return e16 <= 1 / 131070 and e8 <= 1 / 510, f"16-bit {e16:.2e}, 8-bit {e8:.2e}"

    def ckpt_rt():
        cfg = networks.ModelConfig(channels=(3, 4), stages=1)
        params = networks.init_params(cfg, 5)
        with tempfile.TemporaryDirectory() as d:
            a, b = Path(d) / "a.ckpt", Path(d) / "b.ckpt"
            io.save_checkpoint(a, params, cfg)
            ck = io.load_checkpoint(a, cfg)
            io.save_checkpoint(b, ck.params, ck.config)
            same = a.read_bytes() == b.read_bytes()
        return same, "save-load-save byte identical"

    return {"tensorfile-roundtrip": tensor_rt, "tensorfile-truncated": truncated,
            "pgm-roundtrip": pgm_rt, "checkpoint-roundtrip": ckpt_rt}


SUITES: Dict[str, Callable[[], Dict[str, Check]]] = {
    "tensor": _tensor_checks,
    "grad": _grad_checks,
    "bdm": _bdm_checks,
    "spatial": _spatial_checks,
    "temporal": _temporal_checks,
    "metrics": _metrics_checks,
    "io": _io_checks,
}


def run_suite(name: str, out=print) -> Tuple[int, int]:
    """Run one suite (or ``all``); prints a PASS/FAIL line per check. Returns (passed, failed)."""
    names = list(SUITES) if name == "all" else [name]
    if any(n not in SUITES for n in names):
        raise KeyError(f"unknown check suite {name!r}; choose from {', '.join(['all', *SUITES])}")
    passed = failed = 0
    for suite in names:
        for check_name, check in SUITES[suite]().items():
            t0 = time.perf_counter()
            try:
                ok, detail = check()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            ok = bool(ok)
            out(f"{'PASS' if ok else 'FAIL'} {suite}/{check_name} ({time.perf_counter() - t0:.2f}s) {detail}")
            passed += ok
            failed += not ok
    out(f"{passed} passed, {failed} failed")
    return passed, failed
