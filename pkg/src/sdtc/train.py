"""AdamW, the step learning-rate schedule, and the training/evaluation loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import Batch, SequenceSample, augment, collate, generate_sequence
from .losses import (GradCheckReport, PCKReport, argmax_joints, finite_diff_check, heatmap_targets, loss_pose,
                     loss_reconstruction, loss_total, pck_accuracy)
from .model import ModelOutput, SDTCModel
from .nn import ParamStore
from .mlsme import MLSME
from .tensor import ContractError, NumericError, Tape, Tensor, precision

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> OptimizerState:
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **hyper)

    def entries(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step], dtype=np.int32)}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_entries(self, entries: dict[str, np.ndarray]) -> None:
        self.step = int(entries["step"][0])
        for k in self.m:
            self.m[k] = entries[f"m.{k}"].astype(self.m[k].dtype)
            self.v[k] = entries[f"v.{k}"].astype(self.v[k].dtype)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, lr: float) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns new parameter arrays."""
    for name in params:
        if name not in grads:
            raise ContractError(f"missing gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        dt = p.dtype.type
        m = state.m[name] = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1 - b2) * g * g
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        out[name] = p * dt(1.0 - lr * state.weight_decay) - dt(lr) * update
    return out


def lr_at(epoch: int, base_lr: float, milestones: Sequence[int], decay: float) -> float:
    """Piecewise-constant schedule: multiply by ``decay`` at each milestone reached."""
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    return base_lr * decay ** sum(1 for m in milestones if epoch >= m)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


# ---------------------------------------------------------------------------
# losses for one batch


@dataclass
class StepResult:
    losses: dict[str, Tensor]
    output: ModelOutput

    def floats(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.losses.items()}


def sample_rngs(seed: int, step: int, indices: Sequence[int]) -> list[np.random.Generator]:
    """Independent mask streams per (seed, step, sample index)."""
    return [np.random.default_rng([seed, step, int(i), 17]) for i in indices]


def _check_finite(named: Sequence[tuple[str, Tensor | None]]) -> None:
    for name, t in named:
        if t is not None and not np.isfinite(t.data).all():
            raise NumericError(f"non-finite values in {name}")


def compute_losses(model: SDTCModel, batch: Batch, ps: ParamStore | None = None,
                   mode: str = "train", rngs=None, masks=None,
                   context_target: np.ndarray | None = None) -> StepResult:
    """``context_target`` replaces the (detached) backbone tokens as the context
    reconstruction target; finite-difference checks use it to hold the target fixed."""
    cfg = model.cfg
    ps = ps or model.ps
    m, lc = cfg.model, cfg.loss
    out = model(Tensor(batch.frames, dtype=ps.dtype), ps, mode, rngs, masks)
    size = (m.heatmap_h, m.heatmap_w)
    key = batch.keyframe
    target = heatmap_targets(batch.joints[:, key], batch.visible[:, key], size, lc.sigma, m.stride)
    l_h = loss_pose(out.heatmaps, target, batch.visible[:, key], lc.visibility_masking)
    rec = out.motion.recon
    ctx = pose_rec = None
    if rec is not None:
        seq_target = heatmap_targets(batch.joints, batch.visible, size, lc.sigma, m.stride)
        vis = batch.visible if lc.visibility_masking else None
        l_rec, ctx, pose_rec = loss_reconstruction(
            rec.contexts, out.spatial if context_target is None else Tensor(context_target),
            rec.pose_seq, seq_target, out.motion.tube,
            out.motion.frames, lc.lam, vis, lc.pose_rec_masked_only)
    else:
        l_rec = l_h * 0.0
    total = loss_total(l_h, l_rec)
    _check_finite([("spatial tokens", out.spatial), ("motion features", out.motion.motion.fused),
                   ("heatmaps", out.heatmaps),
                   ("context reconstruction", rec.contexts if rec else None),
                   ("pose reconstruction", rec.pose_seq if rec else None),
                   ("L_H", l_h), ("L_Rec", l_rec)])
    losses = {"L_H": l_h, "L_Rec": l_rec, "L_total": total}
    if ctx is not None:
        losses["L_ctx"], losses["L_pose_rec"] = ctx, pose_rec
    return StepResult(losses, out)


# ---------------------------------------------------------------------------
# trainer


@dataclass
class EpochLog:
    epoch: int
    L_H: float
    L_Rec: float
    L_total: float
    lr: float
    eval_mean: float

    def format(self) -> str:
        return (f"epoch={self.epoch} L_H={self.L_H:.6e} L_Rec={self.L_Rec:.6e} "
                f"L_total={self.L_total:.6e} lr={self.lr:.3e} eval_mean={100 * self.eval_mean:.2f}")


class Trainer:
    def __init__(self, cfg: RunConfig, model: SDTCModel | None = None):
        self.cfg = cfg
        self.model = model or SDTCModel(cfg)
        t = cfg.train
        self.state = OptimizerState.zeros_like(
            self.model.ps.state(), beta1=t.beta1, beta2=t.beta2, eps=t.eps,
            weight_decay=t.weight_decay)

    @property
    def ps(self) -> ParamStore:
        return self.model.ps

    @property
    def step(self) -> int:
        return self.state.step

    def train_step(self, batch: Batch, lr: float) -> dict[str, float]:
        ps = self.ps
        rngs = sample_rngs(self.cfg.train.seed, self.state.step, batch.indices)
        with Tape() as tape:
            tape.watch(ps.tensors())
            res = compute_losses(self.model, batch, ps, "train", rngs)
        grads_map = tape.backward(res.losses["L_total"])
        grads = {name: grads_map[t] for name, t in ps.items()}
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")
        if self.cfg.train.grad_clip > 0:
            grads = clip_global_norm(grads, self.cfg.train.grad_clip)
        new = optimizer_step(ps.state(), grads, self.state, lr)
        for name, value in new.items():
            ps.set(name, value)
        return res.floats()

    def batches(self, samples: Sequence[SequenceSample], epoch: int) -> list[Batch]:
        t = self.cfg.train
        order = np.random.default_rng([t.seed, epoch, 3]).permutation(len(samples))
        out = []
        for lo in range(0, len(order), t.batch_size):
            idx = order[lo:lo + t.batch_size]
            chosen = [samples[i] for i in idx]
            if self.cfg.data.augment:
                chosen = [augment(s, np.random.default_rng([t.seed, epoch, int(i), 5]))
                          for s, i in zip(chosen, idx)]
            out.append(collate(chosen, idx))
        return out

    def steps_per_epoch(self, n: int) -> int:
        t = self.cfg.train
        return t.steps_per_epoch or max(1, math.ceil(n / t.batch_size))

    def fit(self, samples: Sequence[SequenceSample], epochs: int | None = None,
            eval_samples: Sequence[SequenceSample] | None = None,
            on_epoch: Callable[[EpochLog, Trainer], None] | None = None,
            eval_each_epoch: bool = True) -> list[EpochLog]:
        """Train from the current step up to ``epochs`` epochs in total.

        With ``eval_each_epoch=False`` the logged accuracy is NaN.
        """
        t = self.cfg.train
        epochs = t.epochs if epochs is None else epochs
        spe = self.steps_per_epoch(len(samples))
        logs = []
        start = self.state.step // spe
        for epoch in range(start, epochs):
            lr = lr_at(epoch, t.base_lr, t.milestones, t.decay)
            sums = {"L_H": 0.0, "L_Rec": 0.0, "L_total": 0.0}
            n = 0
            batches = self.batches(samples, epoch)
            for i in range(spe):
                metrics = self.train_step(batches[i % len(batches)], lr)
                for k in sums:
                    sums[k] += metrics[k]
                n += 1
            acc = math.nan
            if eval_each_epoch:
                acc = evaluate(self.model, eval_samples if eval_samples is not None else samples).mean
            entry = EpochLog(epoch + 1, sums["L_H"] / n, sums["L_Rec"] / n, sums["L_total"] / n,
                             lr, acc)
            logs.append(entry)
            log.info(entry.format())
            if on_epoch is not None:
                on_epoch(entry, self)
        return logs

    # -- persistence ---------------------------------------------------------
    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.ps.state())
        checkpoint.save(checkpoint.optimizer_path(path), self.state.entries())

    def load(self, path: str | Path, with_optimizer: bool = True) -> None:
        load_params(self.ps, checkpoint.load(path))
        opt = checkpoint.optimizer_path(path)
        if with_optimizer and opt.exists():
            self.state.load_entries(checkpoint.load(opt))


def load_params(ps: ParamStore, entries: dict[str, np.ndarray]) -> None:
    missing = set(ps.names()) - set(entries)
    extra = set(entries) - set(ps.names())
    if missing or extra:
        raise ContractError(f"checkpoint does not match model: missing {sorted(missing)[:3]}, "
                            f"unexpected {sorted(extra)[:3]}")
    for name in ps.names():
        ps.set(name, entries[name])


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(model: SDTCModel, samples: Sequence[SequenceSample], batch_size: int = 8):
    """Keyframe heatmaps ``(N, K, H', W')`` and decoded joints ``(N, K, 2)``, no masking."""
    maps = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        frames = np.stack([s.frames for s in chunk])
        maps.append(model(Tensor(frames, dtype=model.ps.dtype), mode="infer").heatmaps.data)
    if not maps:
        k, h, w = model.cfg.model.num_joints, model.cfg.model.heatmap_h, model.cfg.model.heatmap_w
        return np.zeros((0, k, h, w), np.float32), np.zeros((0, k, 2))
    heatmaps = np.concatenate(maps)
    return heatmaps, argmax_joints(heatmaps, model.cfg.model.stride)


def evaluate(model: SDTCModel, samples: Sequence[SequenceSample]) -> PCKReport:
    m = model.cfg.model
    _, pred = predict(model, samples)
    key = m.frames // 2
    if len(samples) == 0:
        return pck_accuracy(np.zeros((0, m.num_joints, 2)), np.zeros((0, m.num_joints, 2)),
                            np.zeros((0, m.num_joints), bool), model.cfg.loss.pck_alpha,
                            (m.img_h, m.img_w))
    gt = np.stack([s.joints[key] for s in samples])
    vis = np.stack([s.visible[key] for s in samples])
    return pck_accuracy(pred, gt, vis, model.cfg.loss.pck_alpha, (m.img_h, m.img_w))


# ---------------------------------------------------------------------------
# gradient check


def model_grad_check(cfg: RunConfig, coords: int = 8, step: float = 1e-5, tol: float = 1e-4,
                     seed: int | None = None) -> GradCheckReport:
    """Finite-difference check of ``L_total`` for the whole model at float64.

    Uses one generated sequence and masks drawn once, so every probe sees the
    same function. The context reconstruction target is detached on the tape,
    so probes hold it at its value for the unperturbed parameters.
    """
    seed = cfg.train.seed if seed is None else seed
    with precision("float64"):
        model = SDTCModel(cfg, seed=seed, dtype=np.float64)
        batch = collate([generate_sequence(cfg.data.seed, cfg.model, cfg.data)], [0])
        masks = None
        if isinstance(model.motion, MLSME):
            masks = model.motion.sample_masks(sample_rngs(seed, 0, [0]), 1)
        target = model.tokens(Tensor(batch.frames), model.ps).data

        def f(params: dict[str, Tensor]) -> Tensor:
            view = ParamStore.view(params, np.float64)
            return compute_losses(model, batch, view, "train", masks=masks,
                                  context_target=target).losses["L_total"]

        return finite_diff_check(f, model.ps.state(), step=step, tol=tol, coords=coords, seed=seed)
