"""File formats: raw tensors, PGM images, checkpoints and dataset directories.

TensorFile (little-endian throughout)::

    b"DDN1" | element code u8 (0=f32, 1=f64) | rank u8 | dims u32 * rank | payload

Checkpoint container::

    b"DDNCKPT1\\n"
    text manifest, one entry per line, terminated by "end\\n":
        kind=<model kind>
        config.<field>=<value>
        meta.<key>=<value>
        record <name> <dims> <offset> <nbytes>
    payload: concatenated TensorFile blobs, offsets relative to payload start

Record names are ``param/<leaf>`` for parameters, ``best/<leaf>`` for the
best-validation parameters and ``adam.m/<leaf>``, ``adam.v/<leaf>`` for
optimizer moments. Dims are ``x``-joined, ``-`` for rank 0.

Dataset directory::

    manifest.txt             key=value lines incl. train= and test= index lists
    frames/NNNN.pgm          single-frame images (16-bit)
    masks/NNNN.pgm           binary masks (8-bit, 0/255)
    clips/CCCC/frames/NNNN.pgm, clips/CCCC/masks/NNNN.pgm   sequences
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import networks
from .networks import ModelConfig, ModelParams
from .tensor import MAX_RANK, Tensor

TENSOR_MAGIC = b"DDN1"
CKPT_MAGIC = b"DDNCKPT1\n"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBB")


class FormatError(ValueError):
    """Malformed or inconsistent file content."""


class TruncatedError(FormatError):
    def __init__(self, what: str, expected: int, actual: int):
        super().__init__(f"{what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class CheckpointError(ValueError):
    def __init__(self, message: str, missing=(), unknown=(), mismatched=()):
        super().__init__(message)
        self.missing = list(missing)
        self.unknown = list(unknown)
        self.mismatched = list(mismatched)


# ---------------------------------------------------------------------------
# TensorFile
# ---------------------------------------------------------------------------

def encode_tensor(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise FormatError(f"unsupported element type {arr.dtype}; only float32/float64")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    head = _HEADER.pack(TENSOR_MAGIC, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode_tensor(buf: bytes, what: str = "tensor") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"{what} header", _HEADER.size, len(buf))
    magic, code, rank = _HEADER.unpack_from(buf)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if code not in _CODES:
        raise FormatError(f"{what}: unknown element code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"{what}: rank {rank} exceeds {MAX_RANK}")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise TruncatedError(f"{what} dims", off + 4 * rank, len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dt = _CODES[code]
    expected = dt.itemsize
    for d in dims:
        expected *= d
    actual = len(buf) - off
    if actual != expected:
        if actual < expected:
            raise TruncatedError(f"{what} payload", expected, actual)
        raise FormatError(f"{what} payload: expected {expected} bytes, got {actual} (trailing data)")
    return np.frombuffer(buf, dtype=dt, count=expected // dt.itemsize, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(path, x) -> None:
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# PGM (binary P5)
# ---------------------------------------------------------------------------

def write_pgm(path, image, maxval: int = 65535) -> None:
    """Write a [H,W] (or [1,H,W]) image in [0,1] as P5; 16-bit when maxval > 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise FormatError(f"PGM image must be 2-D, got dims {img.shape}")
    if not 1 <= maxval <= 65535:
        raise FormatError(f"maxval must be in [1, 65535], got {maxval}")
    if not np.isfinite(img).all():
        raise FormatError("PGM image contains non-finite values")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    data = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + data)


def _pgm_tokens(buf: bytes, count: int) -> Tuple[List[int], int]:
    """First ``count`` header tokens after skipping comments; returns end offset."""
    toks, i, n = [], 0, len(buf)
    while len(toks) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise FormatError("PGM header truncated")
        if buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        toks.append(buf[i:j])
        i = j
    return toks, i


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a float64 [H,W] array scaled to [0,1]."""
    buf = Path(path).read_bytes()
    toks, i = _pgm_tokens(buf, 4)
    if toks[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {toks[0]!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header {toks[1:]!r}") from exc
    if w <= 0 or h <= 0 or not 1 <= maxval <= 65535:
        raise FormatError(f"{path}: invalid PGM header values w={w} h={h} maxval={maxval}")
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after PGM header")
    i += 1
    dt = np.dtype(">u2" if maxval > 255 else "u1")
    need = w * h * dt.itemsize
    if len(buf) - i < need:
        raise TruncatedError(f"{path} PGM raster", need, len(buf) - i)
    raster = np.frombuffer(buf, dtype=dt, count=w * h, offset=i).reshape(h, w)
    if raster.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    return raster.astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# config text helpers
# ---------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, like):
    """Parse ``text`` to the type of the default value ``like``."""
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, tuple):
        items = [t for t in text.split(",") if t.strip()]
        elem = like[0] if like else 0
        return tuple(parse_value(t, elem) for t in items)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def config_lines(cfg: ModelConfig) -> List[str]:
    return [f"config.{k}={format_value(v)}" for k, v in cfg.as_dict().items()]


def config_from_items(items: Dict[str, str]) -> ModelConfig:
    defaults = ModelConfig()
    kw = {}
    for f in fields(ModelConfig):
        if f.name in items:
            kw[f.name] = parse_value(items[f.name], getattr(defaults, f.name))
    unknown = set(items) - {f.name for f in fields(ModelConfig)}
    if unknown:
        raise CheckpointError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    params: ModelParams
    adam: Optional[object] = None  # training.AdamState
    best_params: Optional[ModelParams] = None
    meta: Dict[str, str] = field(default_factory=dict)


def _dims_text(shape) -> str:
    return "x".join(str(d) for d in shape) if len(shape) else "-"


def _parse_dims(text: str) -> Tuple[int, ...]:
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(path, params: ModelParams, config: ModelConfig, adam=None, kind: Optional[str] = None,
                    best_params: Optional[ModelParams] = None, meta: Optional[Dict[str, object]] = None) -> None:
    """Write a checkpoint; records are emitted in sorted-name order so output is canonical."""
    kind = kind or _infer_kind(params)
    records: List[Tuple[str, np.ndarray]] = []
    for name in sorted(params):
        records.append((f"param/{name}", params[name].data if isinstance(params[name], Tensor) else params[name]))
    if best_params is not None:
        for name in sorted(best_params):
            records.append((f"best/{name}", best_params[name].data))
    if adam is not None:
        for name in sorted(adam.m):
            records.append((f"adam.m/{name}", adam.m[name]))
        for name in sorted(adam.v):
            records.append((f"adam.v/{name}", adam.v[name]))
    meta = dict(meta or {})
    if adam is not None:
        meta["adam_step"] = adam.step
    lines = [f"kind={kind}"] + config_lines(config)
    lines += [f"meta.{k}={format_value(meta[k])}" for k in sorted(meta)]
    blobs, offset = [], 0
    for name, arr in records:
        if any(c.isspace() for c in name):
            raise CheckpointError(f"record name {name!r} contains whitespace")
        blob = encode_tensor(np.asarray(arr))
        lines.append(f"record {name} {_dims_text(np.shape(arr))} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    manifest = ("\n".join(lines) + "\nend\n").encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(CKPT_MAGIC + manifest + b"".join(blobs))
    os.replace(tmp, path)


def _infer_kind(params) -> str:
    return "std2net" if any(k.startswith("std2net.") for k in params) else "sd2net"


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint without validating it against any expected layout."""
    from .training import AdamState

    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    end = buf.find(b"\nend\n", len(CKPT_MAGIC) - 1)
    if end < 0:
        raise CheckpointError(f"{path}: manifest terminator missing")
    text = buf[len(CKPT_MAGIC):end + 1].decode("utf-8")
    payload = buf[end + len(b"\nend\n"):]
    kind, cfg_items, meta, recs = None, {}, {}, {}
    for line in text.splitlines():
        if line.startswith("record "):
            parts = line.split()
            if len(parts) != 5:
                raise CheckpointError(f"{path}: malformed record line {line!r}")
            _, name, dims, off, length = parts
            recs[name] = (_parse_dims(dims), int(off), int(length))
        elif line.startswith("kind="):
            kind = line[5:]
        elif line.startswith("config."):
            k, v = line[7:].split("=", 1)
            cfg_items[k] = v
        elif line.startswith("meta."):
            k, v = line[5:].split("=", 1)
            meta[k] = v
        elif line.strip():
            raise CheckpointError(f"{path}: unexpected manifest line {line!r}")
    if kind not in networks.MODEL_KINDS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    groups: Dict[str, Dict[str, np.ndarray]] = {}
    for name, (dims, off, length) in recs.items():
        if off + length > len(payload):
            raise CheckpointError(f"{path}: record {name} extends past end of file")
        arr = decode_tensor(payload[off:off + length], name)
        if arr.shape != dims:
            raise CheckpointError(f"{path}: record {name} dims {arr.shape} disagree with manifest {dims}")
        prefix, leaf = name.split("/", 1)
        groups.setdefault(prefix, {})[leaf] = arr
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in groups.get("param", {}).items()}
    best = ({k: Tensor(v, requires_grad=True, name=k) for k, v in groups["best"].items()}
            if "best" in groups else None)
    adam = None
    if "adam_step" in meta:
        adam = AdamState(dict(groups.get("adam.m", {})), dict(groups.get("adam.v", {})), int(meta.pop("adam_step")))
    return Checkpoint(kind, config_from_items(cfg_items), params, adam, best, meta)


def _validate_tree(tree: Dict[str, Tensor], layout, label: str) -> None:
    want = {name: tuple(dims) for name, dims, _ in layout}
    missing = [n for n in want if n not in tree]
    unknown = sorted(n for n in tree if n not in want)
    mismatched = [n for n in want if n in tree and tuple(tree[n].shape) != want[n]]
    msgs = []
    if missing:
        msgs.append(f"missing {label} leaves: {', '.join(missing)}")
    if unknown:
        msgs.append(f"unknown {label} leaves: {', '.join(unknown)}")
    for n in mismatched:
        msgs.append(f"{label} leaf {n}: stored dims {tuple(tree[n].shape)} != expected {want[n]}")
    if msgs:
        raise CheckpointError("; ".join(msgs), missing, unknown, mismatched)


def load_checkpoint(path, config: Optional[ModelConfig] = None, kind: Optional[str] = None) -> Checkpoint:
    """Read and validate a checkpoint.

    When ``config`` is given every leaf is checked against the layout that
    config implies, and a differing stored config is rejected.
    """
    ck = read_checkpoint(path)
    if kind is not None and kind != ck.kind:
        raise CheckpointError(f"{path}: checkpoint holds a {ck.kind} model, expected {kind}")
    expect = config if config is not None else ck.config
    layout = networks.param_layout(expect, ck.kind)
    _validate_tree(ck.params, layout, "parameter")
    if ck.best_params is not None:
        _validate_tree(ck.best_params, layout, "best-parameter")
    if ck.adam is not None:
        for label, moments in (("adam.m", ck.adam.m), ("adam.v", ck.adam.v)):
            for name, arr in moments.items():
                if name not in ck.params or arr.shape != ck.params[name].shape:
                    raise CheckpointError(f"{path}: {label} record {name} does not match a parameter leaf")
    if config is not None and config != ck.config:
        diff = [k for k, v in config.as_dict().items() if ck.config.as_dict()[k] != v]
        raise CheckpointError(f"{path}: config mismatch on keys {', '.join(diff)}")
    return ck


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

MASK_MAXVAL = 255
FRAME_MAXVAL = 65535


def _name(i: int) -> str:
    return f"{i:04d}.pgm"


def write_manifest(path: Path, items: Dict[str, object]) -> None:
    path.write_text("".join(f"{k}={format_value(v)}\n" for k, v in items.items()))


def read_manifest(path: Path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed manifest line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _ids(text: str) -> List[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def write_image_set(root: Path, images: np.ndarray, masks: np.ndarray) -> None:
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (img, m) in enumerate(zip(images, masks)):
        write_pgm(root / "frames" / _name(i), img, FRAME_MAXVAL)
        write_pgm(root / "masks" / _name(i), m, MASK_MAXVAL)


def read_image_set(root: Path, count: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    names = sorted(p.name for p in (root / "frames").glob("*.pgm"))
    if count is not None and len(names) != count:
        raise FormatError(f"{root}: expected {count} frames, found {len(names)}")
    imgs = np.stack([read_pgm(root / "frames" / n) for n in names])[:, None]
    masks = np.stack([read_pgm(root / "masks" / n) for n in names])[:, None]
    return imgs, (masks > 0.5).astype(np.float64)


@dataclass
class DatasetDir:
    kind: str  # "single" or "sequence"
    inputs: np.ndarray  # [n,1,H,W] images or [n,K,1,H,W] clips
    masks: np.ndarray  # [n,1,H,W] or [n,K,1,H,W]
    train: List[int]
    test: List[int]
    manifest: Dict[str, str]


def load_dataset(root) -> DatasetDir:
    root = Path(root)
    mpath = root / "manifest.txt"
    if not mpath.exists():
        raise FormatError(f"{root}: no manifest.txt (not a dataset directory)")
    man = read_manifest(mpath)
    kind = man.get("kind")
    n = int(man.get("count", "0"))
    if kind == "single":
        inputs, masks = read_image_set(root, n)
    elif kind == "sequence":
        clips = [read_image_set(root / "clips" / f"{c:04d}") for c in range(n)]
        inputs = np.stack([c[0] for c in clips])
        masks = np.stack([c[1] for c in clips])
    else:
        raise FormatError(f"{root}: unknown dataset kind {kind!r}")
    train, test = _ids(man.get("train", "")), _ids(man.get("test", ""))
    if set(train) & set(test):
        raise FormatError(f"{root}: train and test splits overlap")
    if any(i < 0 or i >= n for i in train + test):
        raise FormatError(f"{root}: split index out of range")
    return DatasetDir(kind, inputs, masks, train, test, man)


_DIGITS = re.compile(r"^\d+\.pgm$")


def read_clip_dir(root) -> np.ndarray:
    """Frames [K,1,H,W] of a clip directory (either the dir itself or its frames/)."""
    root = Path(root)
    d = root / "frames" if (root / "frames").is_dir() else root
    names = sorted(p.name for p in d.iterdir() if _DIGITS.match(p.name))
    if not names:
        raise FormatError(f"{root}: no NNNN.pgm frames found")
    return np.stack([read_pgm(d / n) for n in names])[:, None]
