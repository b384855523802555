"""Command-line interface: ``ddnet <command> ...`` (or ``python -m ddnet``).

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import os
import sys


def _apply_thread_cap() -> None:
    """Honour DDN_THREADS before numpy loads its BLAS backend."""
    cap = os.environ.get("DDN_THREADS")
    if cap is None:
        return
    if not cap.isdigit() or int(cap) < 1:
        sys.stderr.write(f"error: DDN_THREADS must be a positive integer, got {cap!r}\n")
        raise SystemExit(1)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = cap


_apply_thread_cap()

import argparse  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass, field, fields  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Dict, List, Optional, Sequence  # noqa: E402

import numpy as np  # noqa: E402

from . import checks, io, metrics, networks, synth, training  # noqa: E402
from .networks import ModelConfig  # noqa: E402
from .synth import SceneSpec  # noqa: E402
from .temporal import pad_window  # noqa: E402
from .tensor import NonFiniteError, ShapeError  # noqa: E402
from .training import TrainConfig  # noqa: E402

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
LATEST, BEST, LOG = "checkpoint.ckpt", "best.ckpt", "train.log"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    kind: str = "sd2net"
    data_kind: str = "single"
    data_count: int = 640
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if self.kind not in networks.MODEL_KINDS:
            raise ConfigError(f"kind: expected one of {networks.MODEL_KINDS}, got {self.kind!r}")
        if self.data_kind not in ("single", "sequence"):
            raise ConfigError(f"data.kind: expected single or sequence, got {self.data_kind!r}")


_TOP = {"seed": "seed", "kind": "kind", "data.kind": "data_kind", "data.count": "data_count"}
_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "scene": SceneSpec}
_HIDDEN = {("train", "seed")}  # all randomness flows from the top-level seed


def config_schema() -> Dict[str, object]:
    """Every accepted key with its default value."""
    base = RunConfig()
    out = {k: getattr(base, attr) for k, attr in _TOP.items()}
    for sec, cls in _SECTIONS.items():
        inst = getattr(base, sec)
        for f in fields(cls):
            if (sec, f.name) not in _HIDDEN:
                out[f"{sec}.{f.name}"] = getattr(inst, f.name)
    return out


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    items = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        items[k] = v
    return items


def build_config(items: Dict[str, str]) -> RunConfig:
    schema = config_schema()
    unknown = [k for k in items if k not in schema]
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    top, secs = {}, {s: {} for s in _SECTIONS}
    for k, v in items.items():
        try:
            val = io.parse_value(v, schema[k])
        except ValueError as exc:
            raise ConfigError(f"config key {k}: {exc}") from exc
        if k in _TOP:
            top[_TOP[k]] = val
        else:
            sec, name = k.split(".", 1)
            secs[sec][name] = val
    seed = int(top.get("seed", 0))
    try:
        model = ModelConfig(**secs["model"])
        train = TrainConfig(seed=seed, **secs["train"])
        scene = SceneSpec(**secs["scene"])
        return RunConfig(model=model, train=train, scene=scene, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    items: Dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        items.update(parse_config_text(p.read_text(), str(p)))
    for ov in overrides:
        items.update(parse_config_text(ov, "--set"))
    return build_config(items)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def model_inputs(ds: io.DatasetDir, kind: str, window: int, idx: Sequence[int], all_frames: bool) -> training.ArrayDataset:
    """Select split ``idx`` and shape it for ``kind``.

    Sequence data feeds std2net with the last ``window`` frames of each clip;
    sd2net sees every frame when ``all_frames`` is set, otherwise only the
    last one (the frame std2net is scored on).
    """
    idx = list(idx)
    if ds.kind == "single":
        if kind == "std2net":
            raise ConfigError("std2net needs a sequence dataset (data.kind=sequence)")
        return training.ArrayDataset(ds.inputs[idx], ds.masks[idx])
    clips, masks = ds.inputs[idx], ds.masks[idx]
    if kind == "std2net":
        wins = np.stack([np.stack(pad_window(list(c), window)) for c in clips]) if len(idx) else clips[:, :window]
        return training.ArrayDataset(wins, masks[:, -1])
    if all_frames:
        return training.ArrayDataset(clips.reshape((-1,) + clips.shape[2:]), masks.reshape((-1,) + masks.shape[2:]))
    return training.ArrayDataset(clips[:, -1], masks[:, -1])


def split_of(ds: io.DatasetDir, split: str) -> List[int]:
    if split == "train":
        return ds.train
    if split == "test":
        return ds.test
    return sorted(ds.train + ds.test)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, args.set)
    n = cfg.data_count
    if n <= 0:
        raise ConfigError("empty dataset requested")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.scene
    if cfg.data_kind == "single":
        (out / "frames").mkdir()
        (out / "masks").mkdir()
        for i in range(n):
            s = synth.gen_frame(spec, cfg.seed, i)
            io.write_pgm(out / "frames" / f"{i:04d}.pgm", s.image, io.FRAME_MAXVAL)
            io.write_pgm(out / "masks" / f"{i:04d}.pgm", s.mask, io.MASK_MAXVAL)
    else:
        for c in range(n):
            s = synth.gen_sequence(spec, cfg.seed, c)
            io.write_image_set(out / "clips" / f"{c:04d}", s.frames, s.masks)
    train_idx, test_idx = synth.split_indices(n, cfg.seed)
    manifest = {"kind": cfg.data_kind, "count": n, "seed": cfg.seed, "height": spec.height, "width": spec.width}
    if cfg.data_kind == "sequence":
        manifest["frames"] = spec.frames
    manifest.update({f"scene.{f.name}": getattr(spec, f.name) for f in fields(SceneSpec)})
    manifest["train"] = ",".join(str(i) for i in train_idx)
    manifest["test"] = ",".join(str(i) for i in test_idx)
    io.write_manifest(out / "manifest.txt", manifest)
    print(f"samples={n} train={len(train_idx)} test={len(test_idx)} kind={cfg.data_kind} out={out}")
    return EXIT_OK


def _read_log(path: Path) -> List[training.EpochRecord]:
    if not path.exists():
        return []
    return [training.EpochRecord.parse(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    ds = io.load_dataset(args.data)
    train_set = model_inputs(ds, cfg.kind, cfg.model.temporal_window, ds.train, all_frames=True)
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    networks.check_extents(train_set.inputs.shape[-2], train_set.inputs.shape[-1], cfg.model)
    val_set = None
    if args.val == "test" and ds.test:
        val_set = model_inputs(ds, cfg.kind, cfg.model.temporal_window, ds.test, all_frames=False)
    out = Path(args.out)
    resume = None
    if args.resume:
        ck_path = out / LATEST
        if not ck_path.exists():
            raise ConfigError(f"--resume given but {ck_path} does not exist")
        ck = io.load_checkpoint(ck_path, cfg.model, cfg.kind)
        if int(ck.meta.get("seed", cfg.seed)) != cfg.seed:
            raise ConfigError(f"checkpoint was trained with seed {ck.meta.get('seed')}, config has {cfg.seed}")
        nxt = int(ck.meta["next_epoch"])
        log = [r for r in _read_log(out / LOG) if r.epoch < nxt]
        resume = training.ResumeState(ck.params, ck.adam, nxt, ck.best_params or networks.copy_params(ck.params),
                                      float(ck.meta.get("best_score", "-1")), log)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG
    if resume is None:
        log_path.write_text("")
    else:
        log_path.write_text("".join(r.line() + "\n" for r in resume.log))

    def on_epoch(state: training.ResumeState) -> None:
        with log_path.open("a") as fh:
            fh.write(state.log[-1].line() + "\n")
        meta = {"next_epoch": state.next_epoch, "best_score": state.best_miou, "seed": cfg.seed}
        io.save_checkpoint(out / LATEST, state.params, cfg.model, state.adam, cfg.kind, state.best_params, meta)
        io.save_checkpoint(out / BEST, state.best_params, cfg.model, None, cfg.kind, None, {"seed": cfg.seed})
        print(state.log[-1].line(), flush=True)

    result = training.train(cfg.kind, train_set, cfg.train, cfg.model, val_set, resume, on_epoch,
                            stop_after=args.stop_after, snapshot_path=out / "diverged.ckpt")
    last = result.log[-1].epoch + 1 if result.log else 0
    print(f"done epochs={last} checkpoint={out / LATEST} best={out / BEST} log={log_path}")
    return EXIT_OK


def _probabilities(args, ds: io.DatasetDir, idx: List[int]):
    """Probability maps and masks for a split, from a checkpoint or a stub."""
    if args.stub:
        gts = ds.masks[idx] if ds.kind == "single" else ds.masks[idx][:, -1]
        probs = gts.astype(np.float64) if args.stub == "oracle" else np.full(gts.shape, 0.5)
        return probs, gts
    ck = _load_ckpt(args.checkpoint)
    data = model_inputs(ds, ck.kind, ck.config.temporal_window, idx, all_frames=False)
    probs = training.predict_probs(ck.kind, ck.params, ck.config, data.inputs.astype(np.float32))
    return probs.astype(np.float64), data.masks


def _load_ckpt(path) -> io.Checkpoint:
    if path is None:
        raise ConfigError("--checkpoint is required (or use --stub)")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return io.load_checkpoint(p)


def cmd_eval(args) -> int:
    ds = io.load_dataset(args.data)
    idx = split_of(ds, args.split)
    if not idx:
        raise ConfigError(f"split {args.split!r} is empty")
    probs, gts = _probabilities(args, ds, idx)
    report = metrics.evaluate(list(probs[:, 0]), list(gts[:, 0]), args.threshold, match_dist=args.match_dist)
    text = report.text()
    sys.stdout.write(text)
    Path(args.report).write_text(text)
    if args.probs_out:
        io.write_tensor(args.probs_out, probs)
    return EXIT_OK


def cmd_roc(args) -> int:
    ds = io.load_dataset(args.data)
    idx = split_of(ds, args.split)
    if not idx:
        raise ConfigError(f"split {args.split!r} is empty")
    thresholds = [float(t) for t in args.thresholds.split(",")] if args.thresholds else list(metrics.DEFAULT_THRESHOLDS)
    probs, gts = _probabilities(args, ds, idx)
    pts, auc = metrics.roc_auc(list(probs[:, 0]), [g > 0.5 for g in gts[:, 0]], thresholds)
    Path(args.out).write_text("".join(f"{fpr:.9f} {tpr:.9f}\n" for fpr, tpr in pts))
    print(f"auc={auc:.6f} points={len(pts)} out={args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    src = Path(args.input)
    if not src.exists():
        raise ConfigError(f"input not found: {src}")
    if src.is_dir():
        frames = io.read_clip_dir(src)
        if ck.kind == "std2net":
            x = np.stack(pad_window(list(frames), ck.config.temporal_window))[None]
        else:
            x = frames[-1][None]
        stem = src.name
    else:
        img = io.read_pgm(src)
        if ck.kind == "std2net":
            x = np.stack([img[None]] * ck.config.temporal_window)[None]
        else:
            x = img[None, None]
        stem = src.stem
    networks.check_extents(x.shape[-2], x.shape[-1], ck.config)
    prob = training.predict_probs(ck.kind, ck.params, ck.config, x.astype(np.float32))[0, 0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_pgm(out / f"{stem}_prob.pgm", prob, io.FRAME_MAXVAL)
    io.write_pgm(out / f"{stem}_mask.pgm", (prob > args.threshold).astype(float), io.MASK_MAXVAL)
    print(f"wrote {out / f'{stem}_prob.pgm'} {out / f'{stem}_mask.pgm'}")
    return EXIT_OK


def cmd_check(args) -> int:
    if args.suite != "all" and args.suite not in checks.SUITES:
        raise ConfigError(f"unknown suite {args.suite!r}")
    _, failed = checks.run_suite(args.suite)
    return EXIT_OK if failed == 0 else EXIT_INVALID


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config, args.set)
    params = networks.init_params(cfg.model, cfg.seed, cfg.kind)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    shape = (args.batch, 1, args.size, args.size)
    if cfg.kind == "std2net":
        shape = (args.batch, cfg.model.temporal_window, 1, args.size, args.size)
    x = rng.uniform(size=shape).astype(np.float32)
    training.predict_probs(cfg.kind, params, cfg.model, x, args.batch)
    t0 = time.perf_counter()
    for _ in range(args.iters):
        training.predict_probs(cfg.kind, params, cfg.model, x, args.batch)
    dt = (time.perf_counter() - t0) / args.iters
    print(f"params={networks.param_count(params)} batch={args.batch} size={args.size} "
          f"seconds_per_batch={dt:.4f} images_per_second={args.batch / dt:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _config_epilog() -> str:
    lines = ["config keys (key=value, defaults shown):"]
    for k, v in config_schema().items():
        lines.append(f"  {k}={io.format_value(v)}")
    return "\n".join(lines)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddnet", description="Difference decomposition networks for small-target segmentation.",
                                formatter_class=_Formatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=False):
        sp = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter,
                            epilog=_config_epilog() if config else None)
        sp.set_defaults(func=fn)
        if config:
            sp.add_argument("--config", default=None, help="key=value config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override one config key (repeatable)")
        return sp

    g = add("gen-data", cmd_gen_data, "generate a synthetic dataset directory", config=True)
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    t = add("train", cmd_train, "train a model on a dataset directory", config=True)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for checkpoints and the log")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    t.add_argument("--val", choices=("test", "none"), default="test", help="split used for best-checkpoint selection")
    t.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs in this invocation")

    for name, fn, text in (("eval", cmd_eval, "evaluate a checkpoint on a dataset split"),
                           ("roc", cmd_roc, "export pixel-level ROC points and print the AUC")):
        e = add(name, fn, text)
        e.add_argument("--checkpoint", default=None, help="checkpoint file")
        e.add_argument("--data", required=True, help="dataset directory")
        e.add_argument("--split", choices=("test", "train", "all"), default="test", help="dataset split")
        e.add_argument("--stub", choices=("oracle", "constant"), default=None,
                       help="replace the model by ground truth (oracle) or a constant 0.5 map")
        if name == "eval":
            e.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
            e.add_argument("--match-dist", type=float, default=3.0, help="centroid matching distance (px)")
            e.add_argument("--report", default="metrics.txt", help="key=value report file")
            e.add_argument("--probs-out", default=None, help="write probability maps as a tensor file")
        else:
            e.add_argument("--thresholds", default=None,
                           help="comma-separated descending thresholds (default 0.95..0.05 step 0.05)")
            e.add_argument("--out", default="roc.txt", help="two-column fpr/tpr points file")

    i = add("infer", cmd_infer, "predict a probability map and mask for one image or clip directory")
    i.add_argument("--checkpoint", required=True, help="checkpoint file")
    i.add_argument("--input", required=True, help="PGM image or clip directory of NNNN.pgm frames")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")

    c = add("check", cmd_check, "run built-in property suites")
    c.add_argument("suite", nargs="?", default="all", help=f"one of: all, {', '.join(checks.SUITES)}")

    b = add("bench", cmd_bench, "print forward-pass throughput", config=True)
    b.add_argument("--size", type=int, default=64, help="image side length")
    b.add_argument("--batch", type=int, default=4, help="batch size")
    b.add_argument("--iters", type=int, default=3, help="timed iterations")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (training.TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except (ConfigError, io.FormatError, io.CheckpointError, ShapeError, ValueError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
