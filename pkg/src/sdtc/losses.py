"""Heatmap targets, training losses, keypoint accuracy, and a finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .tensor import ContractError, DimensionError, Tape, Tensor

JOINT_NAMES = (
    "head_bottom", "nose", "head_top",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)


def gaussian_heatmap(joints: np.ndarray, visible: np.ndarray, size: tuple[int, int],
                     sigma: float = 2.0, stride: float = 1.0) -> np.ndarray:
    """``(K, H', W')`` unit-amplitude Gaussians at ``joints / stride``.

    ``joints`` is ``(K, 2)`` as ``(x, y)`` in input pixels. Invisible joints get
    an all-zero channel.
    """
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    h, w = size
    joints = np.asarray(joints, dtype=np.float64) / stride
    u = np.arange(w)[None, None, :]
    v = np.arange(h)[None, :, None]
    dx = u - joints[:, 0, None, None]
    dy = v - joints[:, 1, None, None]
    maps = np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    maps[~np.asarray(visible, dtype=bool)] = 0.0
    return maps


def heatmap_targets(joints: np.ndarray, visible: np.ndarray, size, sigma, stride) -> np.ndarray:
    """Vectorised over leading axes of ``joints (..., K, 2)``."""
    lead = joints.shape[:-2]
    flat_j = joints.reshape(-1, *joints.shape[-2:])
    flat_v = visible.reshape(-1, visible.shape[-1])
    maps = np.stack([gaussian_heatmap(j, v, size, sigma, stride) for j, v in zip(flat_j, flat_v)])
    return maps.reshape(*lead, *maps.shape[1:])


def _masked_mse(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean of squared error over channels with non-zero ``weights`` (broadcast to pred[..., :, :])."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    per_pixel = pred.shape[-1] * pred.shape[-2]
    w = np.broadcast_to(weights, pred.shape[:-2]).astype(pred.dtype)
    count = float(w.sum()) * per_pixel
    diff = pred - Tensor(target, dtype=pred.dtype)
    if count == 0:
        return (diff * 0.0).sum()
    sq = diff * diff * Tensor(w[..., None, None])
    return sq.sum() * (1.0 / count)


def loss_pose(pred: Tensor, target: np.ndarray, visible: np.ndarray | None = None,
              visibility_masking: bool = True) -> Tensor:
    """Mean squared heatmap error over included joint channels (0 if none)."""
    if visible is None or not visibility_masking:
        visible = np.ones(pred.shape[:-2], dtype=bool)
    return _masked_mse(pred, target, np.asarray(visible, dtype=bool))


def context_slots(tube: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Bool ``(..., T, L)``: a slot is selected if tube-masked or in a masked frame."""
    tube = np.asarray(tube, dtype=bool)
    frames = np.asarray(frames, dtype=bool)
    return tube[..., None, :] | frames[..., :, None]


def loss_reconstruction(contexts: Tensor, target_tokens: Tensor, pose_seq: Tensor,
                        pose_target: np.ndarray, tube: np.ndarray, frames: np.ndarray,
                        lam: float, visible: np.ndarray | None = None,
                        pose_masked_only: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(total, context_term, pose_term)``.

    The context term is ``lam`` times the mean absolute error over selected
    token slots; the target tokens are detached. The pose term is the heatmap
    MSE over all frames, or only the masked frames when ``pose_masked_only``.
    """
    if contexts.shape != target_tokens.shape:
        raise DimensionError(f"contexts {contexts.shape} vs target {target_tokens.shape}")
    slots = context_slots(tube, frames)
    slots = np.broadcast_to(slots, contexts.shape[:-1])
    n = float(slots.sum()) * contexts.shape[-1]
    diff = contexts - target_tokens.detach()
    if n == 0:
        ctx = (diff * 0.0).sum()
    else:
        sel = Tensor(slots[..., None].astype(contexts.dtype))
        ctx = (tn.abs_(diff) * sel).sum() * (lam / n)

    weights = np.ones(pose_seq.shape[:-2], dtype=bool) if visible is None else np.asarray(visible, bool)
    if pose_masked_only:
        weights = weights & np.asarray(frames, dtype=bool)[..., None]
    pose = _masked_mse(pose_seq, pose_target, weights)
    return ctx + pose, ctx, pose


def loss_total(l_h: Tensor, l_rec: Tensor) -> Tensor:
    return l_h + l_rec


# ---------------------------------------------------------------------------
# decoding and accuracy


def argmax_joints(heatmaps: np.ndarray, stride: float = 1.0) -> np.ndarray:
    """``(..., K, H', W')`` -> ``(..., K, 2)`` peak positions ``(x, y)`` in input pixels."""
    h, w = heatmaps.shape[-2:]
    flat = heatmaps.reshape(*heatmaps.shape[:-2], h * w).argmax(axis=-1)
    ys, xs = np.divmod(flat, w)
    return np.stack([xs, ys], axis=-1).astype(np.float64) * stride


@dataclass
class PCKReport:
    per_joint: np.ndarray  # NaN where a joint had no visible instance
    mean: float
    names: Sequence[str] = field(default=JOINT_NAMES)

    def format(self) -> str:
        lines = []
        for name, acc in zip(self.names, self.per_joint):
            lines.append(f"{name} {100.0 * np.nan_to_num(acc):.2f}")
        lines.append(f"mean {100.0 * self.mean:.2f}")
        return "\n".join(lines) + "\n"


def pck_accuracy(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray, alpha: float,
                 crop: tuple[int, int], names: Sequence[str] = JOINT_NAMES) -> PCKReport:
    """Fraction of visible joints within ``alpha * max(crop)`` pixels, per joint.

    ``pred`` and ``gt`` are ``(N, K, 2)``; ``visible`` is ``(N, K)``.
    """
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    thresh = alpha * max(crop)
    dist = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=-1)
    vis = np.asarray(visible, dtype=bool)
    correct = ((dist <= thresh) & vis).sum(axis=0)
    counts = vis.sum(axis=0)
    per_joint = np.full(counts.shape, np.nan)
    has = counts > 0
    per_joint[has] = correct[has] / counts[has]
    mean = float(per_joint[has].mean()) if has.any() else 0.0
    return PCKReport(per_joint, mean, tuple(names)[: len(per_joint)])


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int
    tol: float
    per_tensor: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def format(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.1e} "
                f"coords={self.checked} worst={self.worst}\n")


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps vanishing gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
                      step: float = 1e-5, tol: float = 1e-4, coords: int = 32, seed: int = 0,
                      floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``params`` maps names to float64 arrays. ``f`` receives a dict of tensors and
    must be deterministic. Up to ``coords`` randomly chosen coordinates are
    probed per tensor.
    """
    names = sorted(params)
    for k in names:
        if params[k].dtype != np.float64:
            raise ContractError(f"finite_diff_check needs float64 parameters, {k} is {params[k].dtype}")
    rng = np.random.default_rng(seed)
    leaves = {k: Tensor(params[k], requires_grad=True) for k in names}
    with Tape() as tape:
        tape.watch(leaves[k] for k in names)
        loss = f(leaves)
    grads = tape.backward(loss)

    def value(k, idx, delta):
        arr = params[k].copy()
        arr[idx] += delta
        probe = dict(leaves)
        probe[k] = Tensor(arr)
        return f(probe).item()

    worst_err, worst, checked, per_tensor = 0.0, "", 0, {}
    for k in names:
        size = params[k].size
        picks = rng.choice(size, size=min(coords, size), replace=False)
        g = grads[leaves[k]]
        t_err = 0.0
        for flat in picks:
            idx = np.unravel_index(int(flat), params[k].shape)
            num = (value(k, idx, step) - value(k, idx, -step)) / (2 * step)
            err = relative_error(float(g[idx]), num, floor)
            checked += 1
            t_err = max(t_err, err)
            if err > worst_err:
                worst_err, worst = err, f"{k}{[int(i) for i in idx]}"
        per_tensor[k] = t_err
    return GradCheckReport(worst_err, worst, checked, tol, per_tensor)
