"""Binary PPM/PGM writers and a thin skeleton overlay for inspecting keyframes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import SKELETON, SkeletonSpec, _segment_mask


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Floats in [0, 1] -> uint8, rounding half up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    """``(3, H, W)`` floats -> P6 file bytes."""
    _, h, w = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(rgb).transpose(1, 2, 0).tobytes()


def pgm_bytes(gray: np.ndarray) -> bytes:
    """``(H, W)`` floats -> P5 file bytes."""
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes(gray).tobytes()


def read_pnm(path: str | Path) -> tuple[str, np.ndarray]:
    """Parse the P5/P6 files written here; returns the magic and a uint8 array."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError(f"unsupported maxval {maxval!r}")
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(body, dtype=np.uint8)
    if arr.size != h * w * channels:
        raise ValueError(f"{path}: expected {h * w * channels} pixel bytes, got {arr.size}")
    return magic.decode("ascii"), arr.reshape((h, w, 3) if channels == 3 else (h, w))


def overlay(frame: np.ndarray, joints: np.ndarray, visible: np.ndarray,
            color=(0.1, 1.0, 0.2), skeleton: SkeletonSpec = SKELETON,
            width: float = 0.6, radius: float = 1.2) -> np.ndarray:
    """Thin bones between visible joint pairs and a dot on every visible joint."""
    img = np.array(frame, dtype=np.float64, copy=True)
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    col = np.asarray(color, dtype=np.float64)[:, None]
    for a, b in skeleton.bones:
        if visible[a] and visible[b]:
            img[:, _segment_mask(xx, yy, joints[a], joints[b], width)] = col
    for (x, y), v in zip(joints, visible):
        if v:
            img[:, (xx - x) ** 2 + (yy - y) ** 2 <= radius * radius] = col
    return img
