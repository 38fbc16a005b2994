"""Synthetic articulated-figure videos, the crop/augmentation pipeline, and dataset files.

Coordinates are ``(x, y)`` in pixel units with pixel ``i`` centred at ``i``.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .config import DataConfig, ModelConfig
from .losses import JOINT_NAMES
from .tensor import ContractError


@dataclass(frozen=True)
class SkeletonSpec:
    names: tuple[str, ...] = JOINT_NAMES
    bones: tuple[tuple[int, int], ...] = (
        (0, 1), (1, 2),            # head bottom -> nose -> head top
        (0, 3), (3, 5), (5, 7),    # left arm
        (0, 4), (4, 6), (6, 8),    # right arm
        (0, 9), (9, 11), (11, 13),  # left leg
        (0, 10), (10, 12), (12, 14),  # right leg
    )

    @property
    def flip_pairs(self) -> np.ndarray:
        """Index permutation swapping left and right joints."""
        perm = np.arange(len(self.names))
        lookup = {n: i for i, n in enumerate(self.names)}
        for i, n in enumerate(self.names):
            for a, b in (("left_", "right_"), ("right_", "left_")):
                if n.startswith(a):
                    perm[i] = lookup[b + n[len(a):]]
        return perm


SKELETON = SkeletonSpec()

_BONE_COLORS = np.array([
    [0.95, 0.85, 0.2], [0.95, 0.85, 0.2],
    [0.9, 0.2, 0.2], [0.95, 0.45, 0.1], [1.0, 0.6, 0.6],
    [0.2, 0.3, 0.95], [0.1, 0.6, 0.95], [0.6, 0.7, 1.0],
    [0.7, 0.1, 0.5], [0.9, 0.3, 0.7], [1.0, 0.6, 0.85],
    [0.1, 0.6, 0.3], [0.2, 0.85, 0.4], [0.6, 1.0, 0.6],
])


@dataclass
class CorruptionSpec:
    occluders: list[tuple[float, float, float, float]] = field(default_factory=list)  # x0, y0, w, h
    occluder_colors: list[tuple[float, float, float]] = field(default_factory=list)
    occluder_frames: np.ndarray | None = None  # bool (T,)
    blur: int = 0
    blur_frames: np.ndarray | None = None  # bool (T,)


@dataclass
class SequenceSample:
    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    joints: np.ndarray  # (T, K, 2) float32
    visible: np.ndarray  # (T, K) bool
    seed: int = 0
    corruption: CorruptionSpec | None = None

    @property
    def keyframe(self) -> int:
        return self.frames.shape[0] // 2

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


# ---------------------------------------------------------------------------
# figure synthesis


def _pose(t: np.ndarray, p: dict) -> np.ndarray:
    """Joint positions ``(T, 15, 2)`` on the canvas for time steps ``t``."""
    T = len(t)
    j = np.zeros((T, 15, 2))

    def ang(key):
        base, amp, freq, phase = p[key]
        return base + amp * np.sin(freq * t + phase)

    def step(a, length, theta):
        return a + length * np.stack([np.sin(theta), np.cos(theta)], axis=-1)

    neck = p["root"][None, :] + p["vel"][None, :] * t[:, None]
    lean = ang("lean")
    up = lean + math.pi
    side = np.stack([np.cos(lean), -np.sin(lean)], axis=-1)
    j[:, 0] = neck
    j[:, 1] = step(neck, p["len"]["neck"], up)
    j[:, 2] = step(j[:, 1], p["len"]["head"], up + ang("head"))
    pelvis = step(neck, p["len"]["torso"], lean)
    for s, sign in ((0, 1.0), (1, -1.0)):
        sh = neck + sign * p["len"]["shoulder"] * side
        hip = pelvis + sign * p["len"]["hip"] * side
        upper = lean + sign * ang(f"arm{s}")
        lower = upper + sign * ang(f"fore{s}")
        j[:, 3 + s] = sh
        j[:, 5 + s] = step(sh, p["len"]["upper_arm"], upper)
        j[:, 7 + s] = step(j[:, 5 + s], p["len"]["forearm"], lower)
        thigh = lean + sign * ang(f"thigh{s}")
        shin = thigh - sign * ang(f"shin{s}")
        j[:, 9 + s] = hip
        j[:, 11 + s] = step(hip, p["len"]["thigh"], thigh)
        j[:, 13 + s] = step(j[:, 11 + s], p["len"]["shin"], shin)
    return j


def _figure_params(rng: np.random.Generator, canvas: tuple[int, int], motion: float) -> dict:
    h, w = canvas
    scale = h / 128.0 * rng.uniform(0.85, 1.1)
    lens = {
        "neck": 6, "head": 8, "torso": 32, "shoulder": 9, "hip": 6,
        "upper_arm": 15, "forearm": 14, "thigh": 19, "shin": 18,
    }
    lens = {k: v * scale * rng.uniform(0.85, 1.15) for k, v in lens.items()}
    p = {"len": lens}

    def osc(base, base_jit, amp):
        return (base + rng.uniform(-base_jit, base_jit), motion * rng.uniform(0, amp),
                rng.uniform(0.4, 1.0), rng.uniform(0, 2 * math.pi))

    p["lean"] = osc(0.0, 0.25, 0.1)
    p["head"] = osc(0.0, 0.3, 0.15)
    for s in (0, 1):
        p[f"arm{s}"] = osc(0.5, 0.5, 0.35)
        p[f"fore{s}"] = osc(0.4, 0.5, 0.35)
        p[f"thigh{s}"] = osc(0.15, 0.2, 0.2)
        p[f"shin{s}"] = osc(0.1, 0.2, 0.2)
    p["root"] = np.array([w * rng.uniform(0.4, 0.6), h * rng.uniform(0.25, 0.35)])
    p["vel"] = motion * rng.uniform(-1.5, 1.5, size=2)
    return p


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    for c in range(3):
        acc = np.full((h, w), rng.uniform(0.3, 0.6))
        for _ in range(3):
            fx, fy = rng.uniform(-0.15, 0.15, size=2)
            acc += rng.uniform(0.03, 0.1) * np.sin(fx * xx + fy * yy + rng.uniform(0, 2 * math.pi))
        img[c] = acc
    img += rng.uniform(-0.04, 0.04, size=img.shape)
    return img


def _segment_mask(xx, yy, a, b, radius) -> np.ndarray:
    d = b - a
    denom = max(float(d @ d), 1e-9)
    t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / denom, 0.0, 1.0)
    px, py = a[0] + t * d[0], a[1] + t * d[1]
    return (xx - px) ** 2 + (yy - py) ** 2 <= radius * radius


def render_figure(background: np.ndarray, joints: np.ndarray, skeleton: SkeletonSpec = SKELETON,
                  limb_width: float = 2.2, joint_radius: float = 2.6) -> np.ndarray:
    """Draw limbs as thick segments and joints as discs on a copy of ``background``."""
    img = background.copy()
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for (a, b), color in zip(skeleton.bones, _BONE_COLORS):
        m = _segment_mask(xx, yy, joints[a], joints[b], limb_width)
        img[:, m] = color[:, None]
    for k, (x, y) in enumerate(joints):
        m = (xx - x) ** 2 + (yy - y) ** 2 <= joint_radius ** 2
        shade = 0.15 + 0.7 * k / (len(joints) - 1)
        img[:, m] = np.array([shade, 1.0 - shade, 0.5])[:, None]
    return img


def _covered(joints: np.ndarray, rect) -> np.ndarray:
    x0, y0, rw, rh = rect
    return ((joints[:, 0] >= x0) & (joints[:, 0] <= x0 + rw)
            & (joints[:, 1] >= y0) & (joints[:, 1] <= y0 + rh))


def _occluders(rng, box, count, coverage):
    x0, y0, bw, bh = box
    rects = []
    area = coverage * bw * bh / max(count, 1)
    for _ in range(count):
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        rw = math.sqrt(area * aspect)
        rh = area / rw
        cx = x0 + rng.uniform(0.15, 0.85) * bw
        cy = y0 + rng.uniform(0.15, 0.85) * bh
        rects.append((cx - rw / 2, cy - rh / 2, rw, rh))
    return rects


def enlarge_bbox(box: Sequence[float], factor: float = 0.25) -> tuple[float, float, float, float]:
    """Grow width and height by ``factor`` around a fixed centre."""
    x0, y0, w, h = box
    if w <= 0 or h <= 0:
        raise ContractError(f"box must have positive size, got {box}")
    nw, nh = w * (1 + factor), h * (1 + factor)
    return (x0 - (nw - w) / 2, y0 - (nh - h) / 2, nw, nh)


def fit_aspect(box, out_hw: tuple[int, int]):
    """Expand the shorter side so ``box`` has the aspect ratio of ``out_hw``."""
    x0, y0, w, h = box
    target = out_hw[1] / out_hw[0]
    cx, cy = x0 + w / 2, y0 + h / 2
    if w / h < target:
        w = h * target
    else:
        h = w / target
    return (cx - w / 2, cy - h / 2, w, h)


def joints_bbox(joints: np.ndarray) -> tuple[float, float, float, float]:
    lo, hi = joints.min(axis=0), joints.max(axis=0)
    size = np.maximum(hi - lo, 1.0)
    return (float(lo[0]), float(lo[1]), float(size[0]), float(size[1]))


def _inside(joints: np.ndarray, h: int, w: int) -> np.ndarray:
    return ((joints[..., 0] >= 0) & (joints[..., 0] <= w - 1)
            & (joints[..., 1] >= 0) & (joints[..., 1] <= h - 1))


def _warp(frames: np.ndarray, inv: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of ``(T, C, H, W)`` at ``inv @ [x, y, 1]`` for every output pixel."""
    oh, ow = out_hw
    yy, xx = np.mgrid[0:oh, 0:ow].astype(np.float64)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    out = np.empty((*frames.shape[:2], oh, ow), dtype=np.float64)
    for t in range(frames.shape[0]):
        for c in range(frames.shape[1]):
            out[t, c] = ndimage.map_coordinates(frames[t, c], [sy, sx], order=1, mode="constant")
    return out


def _apply_affine(a: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ a[:, :2].T + a[:, 2]


def _inverse(a: np.ndarray) -> np.ndarray:
    full = np.vstack([a, [0.0, 0.0, 1.0]])
    return np.linalg.inv(full)[:2]


def crop_transform(box, out_hw: tuple[int, int]) -> np.ndarray:
    """2x3 map from source pixels to crop pixels; the box centre lands on the crop centre."""
    x0, y0, w, h = box
    oh, ow = out_hw
    sx, sy = ow / w, oh / h
    cx, cy = x0 + w / 2, y0 + h / 2
    return np.array([[sx, 0.0, (ow - 1) / 2 - sx * cx],
                     [0.0, sy, (oh - 1) / 2 - sy * cy]])


def crop_resize(sample: SequenceSample, box, out_hw: tuple[int, int]) -> SequenceSample:
    """Crop the same ``box`` from every frame and resize to ``out_hw``."""
    a = crop_transform(box, out_hw)
    frames = _warp(sample.frames.astype(np.float64), _inverse(a), out_hw)
    joints = _apply_affine(a, sample.joints.astype(np.float64))
    visible = sample.visible & _inside(joints, *out_hw)
    return replace(sample, frames=np.clip(frames, 0, 1).astype(np.float32),
                   joints=joints.astype(np.float32), visible=visible)


def augment_transform(hw: tuple[int, int], scale: float, rotation_deg: float,
                      shift: tuple[float, float] = (0.0, 0.0), flip: bool = False) -> np.ndarray:
    """2x3 similarity about the image centre, then an optional horizontal flip."""
    h, w = hw
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    th = math.radians(rotation_deg)
    rot = scale * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    off = c - rot @ c + np.asarray(shift)
    a = np.hstack([rot, off[:, None]])
    if flip:
        f = np.array([[-1.0, 0.0, w - 1], [0.0, 1.0, 0.0]])
        a = np.vstack([f, [0, 0, 1]])[:2] @ np.vstack([a, [0, 0, 1]])
    return a


def apply_augmentation(sample: SequenceSample, a: np.ndarray, flip: bool,
                       skeleton: SkeletonSpec = SKELETON) -> SequenceSample:
    hw = sample.size
    frames = _warp(sample.frames.astype(np.float64), _inverse(a), hw)
    joints = _apply_affine(a, sample.joints.astype(np.float64))
    visible = sample.visible.copy()
    if flip:
        perm = skeleton.flip_pairs
        joints = joints[:, perm]
        visible = visible[:, perm]
    visible &= _inside(joints, *hw)
    return replace(sample, frames=np.clip(frames, 0, 1).astype(np.float32),
                   joints=joints.astype(np.float32), visible=visible)


def augment(sample: SequenceSample, rng: np.random.Generator,
            skeleton: SkeletonSpec = SKELETON) -> SequenceSample:
    """One random scale/rotation/flip/truncation shift shared by all frames."""
    h, w = sample.size
    scale = rng.uniform(0.65, 1.35)
    rot = rng.uniform(-45.0, 45.0)
    flip = bool(rng.random() < 0.5)
    shift = (0.0, 0.0)
    if rng.random() < 0.5:
        shift = (rng.uniform(-0.25, 0.25) * w, rng.uniform(-0.25, 0.25) * h)
    return apply_augmentation(sample, augment_transform((h, w), scale, rot, shift, flip), flip, skeleton)


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8)


def generate_sequence(seed: int, model: ModelConfig, data: DataConfig) -> SequenceSample:
    """Render one person-crop sequence of ``2*delta + 1`` frames, deterministic in ``seed``."""
    T = model.frames
    out_hw = (model.img_h, model.img_w)
    canvas = (data.canvas_h, data.canvas_w)
    motion = 1.0
    for _ in range(12):
        rng = np.random.default_rng([seed, 0x5D7C])
        params = _figure_params(rng, canvas, motion)
        t = np.arange(T, dtype=np.float64) - T // 2
        joints = _pose(t, params)
        box = fit_aspect(enlarge_bbox(joints_bbox(joints[T // 2])), out_hw)
        a = crop_transform(box, out_hw)
        crop_joints = _apply_affine(a, joints)
        step = np.linalg.norm(np.diff(crop_joints, axis=0), axis=-1).max(initial=0.0)
        if step <= data.max_step:
            break
        motion *= 0.7 * data.max_step / step
    else:
        raise ContractError(f"could not satisfy max_step={data.max_step}")

    bg = _background(rng, *canvas)
    frames = np.stack([render_figure(bg, joints[i]) for i in range(T)])
    visible = np.ones((T, len(SKELETON.names)), dtype=bool)

    corr = CorruptionSpec()
    if data.occluders > 0:
        corr.occluders = _occluders(rng, box, data.occluders, data.occluder_coverage)
        corr.occluder_colors = [tuple(rng.uniform(0.1, 0.9, size=3)) for _ in corr.occluders]
        corr.occluder_frames = rng.random(T) < data.occluder_frame_prob
        for i in range(T):
            if not corr.occluder_frames[i]:
                continue
            for (x0, y0, rw, rh), color in zip(corr.occluders, corr.occluder_colors):
                ys = slice(max(int(math.ceil(y0)), 0), max(int(math.floor(y0 + rh)) + 1, 0))
                xs = slice(max(int(math.ceil(x0)), 0), max(int(math.floor(x0 + rw)) + 1, 0))
                frames[i][:, ys, xs] = np.asarray(color)[:, None, None]
                visible[i] &= ~_covered(joints[i], (x0, y0, rw, rh))
    if data.blur > 1:
        if data.blur % 2 == 0:
            raise ContractError(f"blur width must be odd, got {data.blur}")
        corr.blur = data.blur
        corr.blur_frames = rng.random(T) < data.blur_frame_prob
        for i in np.flatnonzero(corr.blur_frames):
            frames[i] = ndimage.uniform_filter(frames[i], size=(1, data.blur, data.blur), mode="nearest")

    sample = SequenceSample(frames.astype(np.float32), joints.astype(np.float32), visible, seed, corr)
    sample = crop_resize(sample, box, out_hw)
    sample.frames = quantize(sample.frames).astype(np.float32) / 255.0
    return sample


def generate_dataset(n: int, model: ModelConfig, data: DataConfig) -> list[SequenceSample]:
    base = data.seed * 1_000_003
    return [generate_sequence(base + i, model, data) for i in range(n)]


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    frames: np.ndarray  # (B, T, 3, H, W)
    joints: np.ndarray  # (B, T, K, 2)
    visible: np.ndarray  # (B, T, K)
    indices: np.ndarray  # dataset positions

    @property
    def keyframe(self) -> int:
        return self.frames.shape[1] // 2


def collate(samples: Sequence[SequenceSample], indices: Iterable[int]) -> Batch:
    return Batch(np.stack([s.frames for s in samples]),
                 np.stack([s.joints for s in samples]),
                 np.stack([s.visible for s in samples]),
                 np.asarray(list(indices)))


# ---------------------------------------------------------------------------
# dataset files

MAGIC = b"SDTD"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_SAMPLE = struct.Struct("<IIIIQ")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_dataset(samples: Sequence[SequenceSample]) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, len(samples)))
    for s in samples:
        T, _, H, W = s.frames.shape
        K = s.joints.shape[1]
        buf.write(_SAMPLE.pack(T, H, W, K, s.seed))
        buf.write(quantize(s.frames).transpose(0, 2, 3, 1).tobytes())
        buf.write(s.joints.astype("<f4").tobytes())
        buf.write(s.visible.astype(np.uint8).tobytes())
    return buf.getvalue()


def decode_dataset(raw: bytes) -> list[SequenceSample]:
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated file header", len(raw))
    magic, version, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    out = []

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise DatasetFormatError(f"truncated {what}: need {n} bytes", off)
        chunk = raw[off:off + n]
        off += n
        return chunk

    for _ in range(count):
        T, H, W, K, seed = _SAMPLE.unpack(take(_SAMPLE.size, "sample header"))
        pix = np.frombuffer(take(T * H * W * 3, "frames"), dtype=np.uint8).reshape(T, H, W, 3)
        joints = np.frombuffer(take(T * K * 2 * 4, "joints"), dtype="<f4").reshape(T, K, 2)
        vis_at = off
        vis = np.frombuffer(take(T * K, "visibility"), dtype=np.uint8).reshape(T, K)
        if vis.max(initial=0) > 1:
            raise DatasetFormatError("visibility byte outside {0, 1}", vis_at)
        frames = pix.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
        out.append(SequenceSample(frames, joints.astype(np.float32), vis.astype(bool), int(seed)))
    if off != len(raw):
        raise DatasetFormatError(f"{len(raw) - off} trailing bytes", off)
    return out


def write_dataset(samples: Sequence[SequenceSample], path: str | Path) -> str:
    """Write samples and return the sha256 of the file bytes."""
    raw = encode_dataset(samples)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def read_dataset(path: str | Path) -> list[SequenceSample]:
    return decode_dataset(Path(path).read_bytes())


def checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
