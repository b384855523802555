"""Synthetic infrared scenes: smooth multi-octave clutter, Gaussian point
targets, pixel noise, and for sequences constant-velocity target tracks with
per-frame flicker, transient point-like glints and static point-like
distractors (unlabeled blobs that look like targets but never move).

All randomness comes from counter-based Philox streams keyed by
``(seed, sample index, attempt)``, so any sample can be regenerated alone.
Ground-truth masks are the half-amplitude footprint of each target's
point-spread function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Tuple

import numpy as np

from .metrics import connected_components

HALF_WIDTH = math.sqrt(2.0 * math.log(2.0))  # PSF >= A/2 within this many sigmas
MAX_SPEED = 2.0
_ATTEMPTS = 64


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    targets: Tuple[int, int] = (1, 3)
    amplitude: Tuple[float, float] = (0.15, 0.45)
    sigma: Tuple[float, float] = (0.6, 1.4)
    background: Tuple[float, float] = (0.15, 0.35)
    clutter_octaves: int = 3
    clutter_amplitude: float = 0.2
    noise_sigma: float = 0.01
    frames: int = 5
    speed: Tuple[float, float] = (0.5, 1.5)
    flicker_amplitude: float = 0.0
    glints: Tuple[int, int] = (0, 0)
    distractors: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ValueError(f"image size must be divisible by 8, got {self.height}x{self.width}")
        lo, hi = self.amplitude
        if lo <= 0 or hi < lo:
            raise ValueError(f"amplitude range must be positive and ordered, got {self.amplitude}")
        if self.sigma[0] <= 0 or self.sigma[1] < self.sigma[0]:
            raise ValueError(f"sigma range must be positive and ordered, got {self.sigma}")
        if self.targets[0] < 0 or self.targets[1] < self.targets[0]:
            raise ValueError(f"targets range invalid: {self.targets}")
        for name in ("glints", "distractors"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range invalid: {(lo, hi)}")
        if not 0 <= self.speed[0] <= self.speed[1] <= MAX_SPEED:
            raise ValueError(f"speed range must lie in [0, {MAX_SPEED}] px/frame, got {self.speed}")
        if self.clutter_amplitude < 0 or self.noise_sigma < 0 or self.flicker_amplitude < 0:
            raise ValueError("clutter, noise and flicker amplitudes must be non-negative")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")


@dataclass(frozen=True)
class Target:
    row: int
    col: int
    amplitude: float
    sigma: float


@dataclass
class LabeledSample:
    image: np.ndarray  # [1,H,W] in [0,1]
    mask: np.ndarray  # [1,H,W] in {0,1}
    targets: List[Target] = field(default_factory=list)
    distractors: List[Target] = field(default_factory=list)


@dataclass
class SequenceSample:
    frames: np.ndarray  # [K,1,H,W]
    masks: np.ndarray  # [K,1,H,W]
    tracks: List[List[Target]] = field(default_factory=list)  # per frame
    backgrounds: np.ndarray = None  # [K,H,W] clutter + flicker, before targets and noise
    glints: List[List[Target]] = field(default_factory=list)
    distractors: List[Target] = field(default_factory=list)


def sample_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index), int(attempt)])))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _bilinear(grid: np.ndarray, h: int, w: int, cell: int) -> np.ndarray:
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def value_noise(rng: np.random.Generator, h: int, w: int, octaves: int, finest: int = 8) -> np.ndarray:
    """Sum of bilinear value-noise octaves, coarsest first, scaled into [-1, 1]."""
    out = np.zeros((h, w))
    weight_sum = 0.0
    for o in range(octaves):
        cell = max(finest, max(h, w) // (2 ** (o + 1)))
        grid = rng.uniform(-1.0, 1.0, size=(h // cell + 2, w // cell + 2))
        wgt = 0.5 ** o
        out += wgt * _bilinear(grid, h, w, cell)
        weight_sum += wgt
    return out / weight_sum if weight_sum else out


def psf(h: int, w: int, t: Target) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w]
    return t.amplitude * np.exp(-((rr - t.row) ** 2 + (cc - t.col) ** 2) / (2.0 * t.sigma ** 2))


def footprint(h: int, w: int, t: Target) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w]
    return ((rr - t.row) ** 2 + (cc - t.col) ** 2) <= (HALF_WIDTH * t.sigma) ** 2


def _margin(spec: SceneSpec) -> int:
    return int(math.ceil(3 * spec.sigma[1])) + 1


def _draw_point(rng, spec, taken: List[Tuple[int, int]], min_sep: float):
    m = _margin(spec)
    for _ in range(200):
        r = int(rng.integers(m, spec.height - m))
        c = int(rng.integers(m, spec.width - m))
        if all(math.hypot(r - a, c - b) >= min_sep for a, b in taken):
            return r, c
    return None


def _separation(spec: SceneSpec) -> float:
    return 2 * (3 * spec.sigma[1]) + 4


def _base_field(rng, spec: SceneSpec) -> np.ndarray:
    base = rng.uniform(*spec.background)
    if spec.clutter_octaves and spec.clutter_amplitude:
        return base + spec.clutter_amplitude * value_noise(rng, spec.height, spec.width, spec.clutter_octaves)
    return np.full((spec.height, spec.width), base)


def local_background(image: np.ndarray, mask: np.ndarray, comp_pixels: np.ndarray, radius: int = 5) -> float:
    """Median of non-mask pixels in a window around a component."""
    r0, c0 = comp_pixels.min(axis=0) - radius
    r1, c1 = comp_pixels.max(axis=0) + radius + 1
    r0, c0 = max(r0, 0), max(c0, 0)
    win = image[r0:r1, c0:c1]
    keep = ~mask[r0:r1, c0:c1].astype(bool)
    return float(np.median(win[keep])) if keep.any() else float("nan")


def contrast_ok(image: np.ndarray, mask: np.ndarray, targets: List[Target], ratio: float = 0.8) -> bool:
    """Every mask component peaks >= ratio * amplitude above its local background median."""
    for comp in connected_components(mask.astype(np.uint8)):
        owner = [t for t in targets if any((comp.pixels == (t.row, t.col)).all(axis=1))]
        if len(owner) != 1:
            return False
        peak = float(image[comp.pixels[:, 0], comp.pixels[:, 1]].max())
        if peak - local_background(image, mask, comp.pixels) < ratio * owner[0].amplitude:
            return False
    return True


def _render(base: np.ndarray, targets, glints, noise: np.ndarray):
    h, w = base.shape
    img = base.copy()
    mask = np.zeros((h, w), dtype=bool)
    for t in targets:
        img += psf(h, w, t)
        mask |= footprint(h, w, t)
    for g in glints:
        img += psf(h, w, g)
    img += noise
    return np.clip(img, 0.0, 1.0), mask


def _draw_targets(rng, spec, count, taken):
    out = []
    for _ in range(count):
        pt = _draw_point(rng, spec, taken, _separation(spec))
        if pt is None:
            break
        taken.append(pt)
        out.append(Target(pt[0], pt[1], float(rng.uniform(*spec.amplitude)), float(rng.uniform(*spec.sigma))))
    return out


# ---------------------------------------------------------------------------
# public generators
# ---------------------------------------------------------------------------

def gen_frame(spec: SceneSpec, seed: int = 0, index: int = 0) -> LabeledSample:
    """One labeled image; a pure function of (spec, seed, index)."""
    for attempt in range(_ATTEMPTS):
        rng = sample_rng(seed, index, attempt)
        base = _base_field(rng, spec)
        count = int(rng.integers(spec.targets[0], spec.targets[1] + 1))
        taken: list = []
        targets = _draw_targets(rng, spec, count, taken)
        spots = _draw_targets(rng, spec, int(rng.integers(spec.distractors[0], spec.distractors[1] + 1)), taken)
        noise = rng.normal(0.0, spec.noise_sigma, size=base.shape) if spec.noise_sigma else 0.0
        img, mask = _render(base, targets, spots, noise)
        if contrast_ok(img, mask, targets):
            return LabeledSample(img[None], mask[None].astype(img.dtype), targets, spots)
    raise RuntimeError(f"could not draw a consistent scene for index {index}; loosen the SceneSpec")


def _track(rng, spec: SceneSpec, frames: int, taken) -> List[Target]:
    h, w, m = spec.height, spec.width, _margin(spec)
    pt = _draw_point(rng, spec, taken, _separation(spec) + MAX_SPEED * frames)
    if pt is None:
        return []
    taken.append(pt)
    amp, sig = float(rng.uniform(*spec.amplitude)), float(rng.uniform(*spec.sigma))
    speed, angle = float(rng.uniform(*spec.speed)), float(rng.uniform(0, 2 * math.pi))
    v = np.array([speed * math.sin(angle), speed * math.cos(angle)])
    p0 = np.array(pt, dtype=float)
    if frames > 1:
        # clamp the velocity so the whole path stays inside the margins
        end = np.clip(p0 + v * (frames - 1), [m, m], [h - 1 - m, w - 1 - m])
        v = (end - p0) / (frames - 1)
    return [Target(int(round(p0[0] + v[0] * k)), int(round(p0[1] + v[1] * k)), amp, sig) for k in range(frames)]


def gen_sequence(spec: SceneSpec, seed: int = 0, index: int = 0, velocity=None) -> SequenceSample:
    """A clip of ``spec.frames`` frames with per-frame masks.

    ``velocity`` overrides the random draw with a fixed (row, col) velocity
    for every target.
    """
    K, h, w = spec.frames, spec.height, spec.width
    for attempt in range(_ATTEMPTS):
        rng = sample_rng(seed, index, attempt)
        static = _base_field(rng, spec)
        count = int(rng.integers(spec.targets[0], spec.targets[1] + 1))
        taken: list = []
        tracks = [_track(rng, spec, K, taken) for _ in range(count)]
        tracks = [t for t in tracks if t]
        if velocity is not None:
            vr, vc = velocity
            tracks = [[Target(int(round(tr[0].row + vr * k)), int(round(tr[0].col + vc * k)),
                              tr[0].amplitude, tr[0].sigma) for k in range(K)] for tr in tracks]
        path = [(t.row, t.col) for tr in tracks for t in tr]
        spots = _draw_targets(rng, spec, int(rng.integers(spec.distractors[0], spec.distractors[1] + 1)), path)
        for sp in spots:
            static = static + psf(h, w, sp)
        frames, masks, backs, glints = [], [], [], []
        ok = True
        for k in range(K):
            back = static.copy()
            if spec.flicker_amplitude:
                back += spec.flicker_amplitude * value_noise(rng, h, w, 1, finest=4)
            ngl = int(rng.integers(spec.glints[0], spec.glints[1] + 1))
            occupied = [(tr[k].row, tr[k].col) for tr in tracks] + [(d.row, d.col) for d in spots]
            gl = _draw_targets(rng, spec, ngl, occupied)
            noise = rng.normal(0.0, spec.noise_sigma, size=(h, w)) if spec.noise_sigma else 0.0
            here = [tr[k] for tr in tracks]
            img, mask = _render(back, here, gl, noise)
            if not contrast_ok(img, mask, here):
                ok = False
                break
            frames.append(img[None])
            masks.append(mask[None].astype(img.dtype))
            backs.append(back)
            glints.append(gl)
        if ok:
            per_frame = [[tr[k] for tr in tracks] for k in range(K)]
            return SequenceSample(np.stack(frames), np.stack(masks), per_frame, np.stack(backs), glints, spots)
    raise RuntimeError(f"could not draw a consistent clip for index {index}; loosen the SceneSpec")


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic disjoint train/test index split (80/20 by default)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x5B17])))
    perm = rng.permutation(n)
    k = int(round(train_fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


def single_frame_arrays(spec: SceneSpec, n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    samples = [gen_frame(spec, seed, i) for i in range(n)]
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.float32))


def sequence_arrays(spec: SceneSpec, n: int, seed: int, window: int) -> Tuple[np.ndarray, np.ndarray]:
    """Last-``window``-frame clips [n,window,1,H,W] and current-frame masks [n,1,H,W]."""
    from .temporal import pad_window

    clips, masks = [], []
    for i in range(n):
        s = gen_sequence(spec, seed, i)
        clips.append(np.stack(pad_window(list(s.frames), window)))
        masks.append(s.masks[-1])
    return np.stack(clips).astype(np.float32), np.stack(masks).astype(np.float32)


def with_size(spec: SceneSpec, height: int, width: int) -> SceneSpec:
    return replace(spec, height=height, width=width)
