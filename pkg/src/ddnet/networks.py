"""U-Module backbone, SD2Net (single frame) and STD2Net (multi frame).

Parameters live in a flat ordered ``dict`` mapping dotted names to leaf
tensors. The set of names and their dims is a pure function of the
:class:`ModelConfig` and model kind; fixed difference kernels are module
constants and never appear in it.

U-Module wiring, for widths ``c0 < c1 < ... < c_{L-1}``::

    enc0 = block(x)                                    c0 -> c0
    enc_l = block(inception_pool(enc_{l-1}))           c_{l-1} -> c_l
    dec_l = block(fuse(cat(up(dec_{l+1}), enc_l)))     back to c_l
    block = 3x3 conv -> ReLU -> SD2M

``up`` is nearest x2 followed by a 3x3 conv and ReLU; ``fuse`` is a 1x1 conv
and ReLU. Nonlinearities never sit between a BDM's inputs and its output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .spatial import inception_pool, sd2m, split_sizes
from .temporal import td2m
from .tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    max_pool2,
    relu,
    reshape,
    slice_axis,
    upsample2,
)

ModelParams = Dict[str, Tensor]

MODEL_KINDS = ("sd2net", "std2net")

# Output heads start at this foreground probability; targets cover well under
# 1% of pixels, and an unbiased 0.5 start leaves the soft-IoU loss flat near 1.
HEAD_PRIOR = 0.01


def projection_gain(name: str, config: ModelConfig) -> float:
    """Init bound multiplier for a decomposition module's 1x1 weight.

    Summing projections onto K unit but non-orthogonal bases multiplies the
    activation scale by roughly sqrt(K/2); a spec-default bound compounds that
    across every block until the head saturates. Orthonormal bases never
    expand, so that variant keeps the plain bound.
    """
    if config.orthogonal:
        return 1.0
    if name.endswith(".sd2m.w"):
        k = 8 * len(config.dilations)
    elif name.endswith(".sd3m.w"):
        k = 4
    else:
        return 1.0
    return float(np.sqrt(2.0 / k))


@dataclass(frozen=True)
class ModelConfig:
    channels: Tuple[int, ...] = (8, 16, 32, 64)
    dilations: Tuple[int, ...] = (1, 3)
    temporal_window: int = 5
    stages: int = 3
    head_channels: int = 1
    bias: bool = True
    use_sd2m: bool = True
    orthogonal: bool = False
    downsample: str = "inception"  # or "maxpool"
    down_basis: str = "dfed"  # or "haar"
    conv_padding: str = "replicate"
    freeze_spatial: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        ch = self.channels
        if len(ch) < 2:
            raise ValueError("channels needs at least two levels")
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"channels must be strictly increasing, got {list(ch)}")
        if ch[0] < 3 and self.downsample == "inception":
            raise ValueError("inception pooling needs at least 3 channels per level")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError(f"dilations must be positive, got {list(self.dilations)}")
        if self.temporal_window < 2:
            raise ValueError("temporal_window must be >= 2")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.head_channels != 1:
            raise ValueError("head_channels must be 1")
        if self.downsample not in ("inception", "maxpool"):
            raise ValueError(f"unknown downsample {self.downsample!r}")
        if self.down_basis not in ("dfed", "haar"):
            raise ValueError(f"unknown down_basis {self.down_basis!r}")
        if self.conv_padding not in ("zero", "replicate"):
            raise ValueError(f"unknown conv_padding {self.conv_padding!r}")

    @property
    def levels(self) -> int:
        return len(self.channels)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def _conv_entry(name, cout, cin, k, bias):
    out = [(f"{name}.w", (cout, cin, k, k), cin * k * k)]
    if bias:
        out.append((f"{name}.b", (cout,), None))
    return out


def _block_entries(name, cin, cout, cfg):
    out = _conv_entry(f"{name}.conv", cout, cin, 3, cfg.bias)
    if cfg.use_sd2m:
        out.append((f"{name}.sd2m.w", (cout, cout, 1, 1), cout))
    return out


def _umodule_entries(prefix, cfg):
    ch = cfg.channels
    out = _block_entries(f"{prefix}enc0", ch[0], ch[0], cfg)
    for lv in range(1, cfg.levels):
        if cfg.downsample == "inception":
            g3 = split_sizes(ch[lv - 1])[2]
            out.append((f"{prefix}down{lv}.sd3m.w", (g3, g3, 1, 1), g3))
        out += _block_entries(f"{prefix}enc{lv}", ch[lv - 1], ch[lv], cfg)
    for lv in range(cfg.levels - 2, -1, -1):
        out += _conv_entry(f"{prefix}up{lv}", ch[lv], ch[lv + 1], 3, cfg.bias)
        out += _conv_entry(f"{prefix}fuse{lv}", ch[lv], 2 * ch[lv], 1, cfg.bias)
        out += _block_entries(f"{prefix}dec{lv}", ch[lv], ch[lv], cfg)
    return out


def param_layout(config: ModelConfig, kind: str = "sd2net") -> list:
    """Ordered (name, dims, fan_in) entries; fan_in is None for biases."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    c0 = config.channels[0]
    out = _conv_entry("sd2net.stem", c0, 1, 3, config.bias)
    for s in range(config.stages):
        out += _umodule_entries(f"sd2net.u{s}.", config)
    out += _conv_entry("sd2net.head", 1, c0, 1, True)
    if kind == "std2net":
        n = config.temporal_window
        out.append(("std2net.td2m.w", (c0, n * c0, 1, 1), n * c0))
        out += _umodule_entries("std2net.u.", config)
        out += _conv_entry("std2net.head", 1, c0, 1, True)
    return out


def init_params(config: ModelConfig, seed: int = 0, kind: str = "sd2net", dtype=np.float32) -> ModelParams:
    """Uniform +-sqrt(6/fan_in) weights (see :func:`projection_gain`), zero biases, drawn in layout order."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x1D2])))
    params = {}
    for name, dims, fan_in in param_layout(config, kind):
        if fan_in is None:
            fill = np.log(HEAD_PRIOR / (1.0 - HEAD_PRIOR)) if name.endswith("head.b") else 0.0
            arr = np.full(dims, fill, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / fan_in) * projection_gain(name, config)
            arr = rng.uniform(-bound, bound, size=dims).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def param_count(params: ModelParams) -> int:
    return int(sum(t.size for t in params.values()))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _conv(x, params, name, cfg):
    return conv2d(x, params[f"{name}.w"], params.get(f"{name}.b"), ConvSpec(padding=cfg.conv_padding))


def _block(x, params, name, cfg):
    h = relu(_conv(x, params, f"{name}.conv", cfg))
    if cfg.use_sd2m:
        h = sd2m(h, params[f"{name}.sd2m.w"], cfg.dilations, cfg.orthogonal)
    return h


def _down(x, params, name, cfg):
    if cfg.downsample == "maxpool":
        return max_pool2(x)
    return inception_pool(x, params[f"{name}.sd3m.w"], cfg.orthogonal, cfg.down_basis)


def check_extents(h: int, w: int, config: ModelConfig) -> None:
    m = 2 ** (config.levels - 1)
    if h % m or w % m:
        raise ShapeError(f"H and W must be divisible by {m} for {config.levels} levels, got H={h}, W={w}")


def u_module_forward(x: Tensor, params: ModelParams, config: ModelConfig, prefix: str = "sd2net.u0.") -> Tensor:
    check_extents(x.shape[2], x.shape[3], config)
    skips = [_block(x, params, f"{prefix}enc0", config)]
    h = skips[0]
    for lv in range(1, config.levels):
        h = _block(_down(h, params, f"{prefix}down{lv}", config), params, f"{prefix}enc{lv}", config)
        skips.append(h)
    for lv in range(config.levels - 2, -1, -1):
        up = relu(_conv(upsample2(h), params, f"{prefix}up{lv}", config))
        fused = relu(_conv(concat([up, skips[lv]], axis=1), params, f"{prefix}fuse{lv}", config))
        h = _block(fused, params, f"{prefix}dec{lv}", config)
    return h


def sd2net_forward(image: Tensor, params: ModelParams, config: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Returns (logits [B,1,H,W], pre-head features [B,c0,H,W])."""
    if image.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"sd2net input must be [B,1,H,W], got dims {image.shape}")
    check_extents(image.shape[2], image.shape[3], config)
    h = relu(_conv(image, params, "sd2net.stem", config))
    for s in range(config.stages):
        h = u_module_forward(h, params, config, f"sd2net.u{s}.")
    return _conv(h, params, "sd2net.head", config), h


def std2net_forward(sequence: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Logits [B,1,H,W] for the last frame of a [B,N,1,H,W] window."""
    if sequence.ndim != 5 or sequence.shape[2] != 1:
        raise ShapeError(f"std2net input must be [B,N,1,H,W], got dims {sequence.shape}")
    B, N, _, H, W = sequence.shape
    if N != config.temporal_window:
        raise ShapeError(f"sequence has N={N} frames, config expects temporal_window={config.temporal_window}")
    _, feats = sd2net_forward(reshape(sequence, (B * N, 1, H, W)), params, config)
    C = feats.shape[1]
    feats = reshape(feats, (B, N, C, H, W))
    frames = [reshape(slice_axis(feats, 1, k, k + 1), (B, C, H, W)) for k in range(N)]
    fused = td2m(frames, params["std2net.td2m.w"], config.orthogonal)
    h = u_module_forward(fused, params, config, "std2net.u.")
    return _conv(h, params, "std2net.head", config)


def forward(kind: str, x: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Logits for either model kind."""
    if kind == "sd2net":
        return sd2net_forward(x, params, config)[0]
    if kind == "std2net":
        return std2net_forward(x, params, config)
    raise ValueError(f"unknown model kind {kind!r}")


def trainable_names(params: ModelParams, config: ModelConfig, kind: str) -> List[str]:
    if kind == "std2net" and config.freeze_spatial:
        return [n for n in params if not n.startswith("sd2net.")]
    return list(params)


def copy_params(params: ModelParams, requires_grad: Optional[bool] = True) -> ModelParams:
    return {n: Tensor(t.data.copy(), requires_grad=requires_grad, name=n) for n, t in params.items()}
