"""Multi-level semantic motion encoder.

Token sequences are ``(..., T, L, C)``. During training the spatial tokens are
tube-masked and run through a patch-level encoder; its output is frame-masked
and run through a frame-level encoder of the same architecture. A motion
decoder reconstructs the token contexts and the per-frame pose heatmaps from
the frame-level features. The motion representation is the sum of the two
encoder outputs. Inference skips both maskings and the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as tn
from .config import MLSMEConfig, ModelConfig
from .nn import LayerNorm, MHSA, FFN, Linear, ParamStore
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class TubeMask:
    masked: np.ndarray  # bool (L,), shared by every frame


@dataclass
class FrameMask:
    masked: np.ndarray  # bool (T,)


@dataclass
class MotionFeatures:
    patch_level: Tensor
    frame_level: Tensor | None
    fused: Tensor


@dataclass
class Reconstruction:
    contexts: Tensor  # (..., T, L, C)
    pose_seq: Tensor  # (..., T, K, H', W')


@dataclass
class MLSMEOutput:
    motion: MotionFeatures
    recon: Reconstruction | None = None
    tube: np.ndarray | None = None  # bool (B, L)
    frames: np.ndarray | None = None  # bool (B, T)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_tube_mask(length: int, ratio: float, rng: np.random.Generator) -> TubeMask:
    if not 0 <= ratio < 1:
        raise ContractError(f"mask ratio must lie in [0, 1), got {ratio}")
    count = _round_half_up(ratio * length)
    masked = np.zeros(length, dtype=bool)
    masked[rng.choice(length, size=count, replace=False)] = True
    return TubeMask(masked)


def sample_frame_mask(frames: int, ratio: float, rng: np.random.Generator,
                      keyframe_maskable: bool = True) -> FrameMask:
    count = int(np.floor(ratio * frames))
    if ratio < 0 or count >= frames:
        raise ContractError(f"frame mask ratio {ratio} would mask {count} of {frames} frames")
    candidates = np.arange(frames)
    if not keyframe_maskable:
        candidates = candidates[candidates != frames // 2]
    masked = np.zeros(frames, dtype=bool)
    masked[rng.choice(candidates, size=count, replace=False)] = True
    return FrameMask(masked)


def apply_tube_mask(tokens: Tensor, masked: np.ndarray, learn_token: Tensor) -> Tensor:
    """Replace masked spatial slots of every frame by ``learn_token``.

    ``masked`` is ``(L,)`` or batched ``(B, L)`` matching the leading axis of tokens.
    """
    masked = np.asarray(masked, dtype=bool)
    sel = masked.reshape(*masked.shape[:-1], 1, masked.shape[-1], 1)
    return tn.where(sel, learn_token, tokens)


def apply_frame_mask(tokens: Tensor, masked: np.ndarray, learn_token: Tensor) -> Tensor:
    masked = np.asarray(masked, dtype=bool)
    sel = masked.reshape(*masked.shape, 1, 1)
    return tn.where(sel, learn_token, tokens)


def joint_space_time_attention(tokens: Tensor, attn: MHSA, ps: ParamStore) -> Tensor:
    """Self-attention over all ``T * L`` tokens of each sequence."""
    *lead, t, l, c = tokens.shape
    flat = tokens.reshape(*lead, t * l, c)
    return attn(flat, ps).reshape(*lead, t, l, c)


def temporal_attention(tokens: Tensor, attn: MHSA, ps: ParamStore) -> Tensor:
    """Each token attends to the tokens at its spatial index in every frame."""
    nd = tokens.ndim
    swap = list(range(nd))
    swap[-3], swap[-2] = swap[-2], swap[-3]
    return attn(tokens.transpose(swap), ps).transpose(swap)


def fuse_motion(patch_level: Tensor, frame_level: Tensor) -> Tensor:
    if patch_level.shape != frame_level.shape:
        raise DimensionError(f"cannot fuse motion features {patch_level.shape} and {frame_level.shape}")
    return patch_level + frame_level


class JointLayer:
    def __init__(self, ps, name, c, heads):
        self.norm = LayerNorm(ps, f"{name}.norm", c)
        self.attn = MHSA(ps, f"{name}.attn", c, heads)

    def __call__(self, x, ps):
        return x + joint_space_time_attention(self.norm(x, ps), self.attn, ps)


class DividedBlock:
    """Temporal attention, spatial attention, FFN; each pre-normed with a residual."""

    def __init__(self, ps, name, c, heads, expansion=4):
        self.norm_t = LayerNorm(ps, f"{name}.norm_t", c)
        self.attn_t = MHSA(ps, f"{name}.attn_t", c, heads)
        self.norm_s = LayerNorm(ps, f"{name}.norm_s", c)
        self.attn_s = MHSA(ps, f"{name}.attn_s", c, heads)
        self.norm_f = LayerNorm(ps, f"{name}.norm_f", c)
        self.ffn = FFN(ps, f"{name}.ffn", c, expansion)

    def __call__(self, x, ps):
        x = x + temporal_attention(self.norm_t(x, ps), self.attn_t, ps)
        x = x + self.attn_s(self.norm_s(x, ps), ps)
        return x + self.ffn(self.norm_f(x, ps), ps)


class MotionEncoder:
    """One joint space-time layer followed by ``n_div`` divided blocks."""

    def __init__(self, ps, name, c, heads, n_div=2, expansion=4):
        self.joint = JointLayer(ps, f"{name}.joint", c, heads)
        self.blocks = [DividedBlock(ps, f"{name}.div{i}", c, heads, expansion) for i in range(n_div)]

    def __call__(self, x, ps):
        x = self.joint(x, ps)
        for block in self.blocks:
            x = block(x, ps)
        return x


class PlainMotionEncoder:
    """Unmasked stack of joint space-time transformer blocks."""

    def __init__(self, ps, name, c, heads, depth=3, expansion=4):
        self.blocks = [nn.TransformerBlock(ps, f"{name}.block{i}", c, heads, expansion)
                       for i in range(depth)]

    def __call__(self, x, ps):
        *lead, t, l, c = x.shape
        x = x.reshape(*lead, t * l, c)
        for block in self.blocks:
            x = block(x, ps)
        return x.reshape(*lead, t, l, c)


class MotionDecoder:
    """Two self-attention layers over all tokens, then context and pose MLP heads."""

    def __init__(self, ps, name, model: ModelConfig, layers=2):
        c = model.channels
        gh, gw = model.grid
        self.grid = (gh, gw)
        self.cell = (model.heatmap_h // gh, model.heatmap_w // gw)
        self.k = model.num_joints
        self.norms = [LayerNorm(ps, f"{name}.layer{i}.norm", c) for i in range(layers)]
        self.attns = [MHSA(ps, f"{name}.layer{i}.attn", c, model.heads) for i in range(layers)]
        self.out_norm = LayerNorm(ps, f"{name}.out_norm", c)
        self.ctx1 = Linear(ps, f"{name}.context_head.fc1", c, c)
        self.ctx2 = Linear(ps, f"{name}.context_head.fc2", c, c)
        self.pose1 = Linear(ps, f"{name}.pose_head.fc1", c, c)
        self.pose2 = Linear(ps, f"{name}.pose_head.fc2", c, self.k * self.cell[0] * self.cell[1])

    def __call__(self, x: Tensor, ps: ParamStore) -> Reconstruction:
        *lead, t, l, c = x.shape
        h = x.reshape(*lead, t * l, c)
        for norm, attn in zip(self.norms, self.attns):
            h = h + attn(norm(h, ps), ps)
        h = self.out_norm(h, ps)
        contexts = self.ctx2(tn.gelu(self.ctx1(h, ps)), ps).reshape(*lead, t, l, c)
        cells = self.pose2(tn.gelu(self.pose1(h, ps)), ps)
        return Reconstruction(contexts, self._assemble(cells, lead, t))

    def _assemble(self, cells: Tensor, lead, t) -> Tensor:
        (gh, gw), (ph, pw), k = self.grid, self.cell, self.k
        nl = len(lead)
        x = cells.reshape(*lead, t, gh, gw, k, ph, pw)
        # -> (..., t, k, gh, ph, gw, pw)
        x = x.transpose(*range(nl + 1), nl + 3, nl + 1, nl + 4, nl + 2, nl + 5)
        return x.reshape(*lead, t, k, gh * ph, gw * pw)


def _as_rngs(rng, batch: int | None) -> list[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return [rng] * (batch or 1)
    rngs = list(rng)
    if batch is not None and len(rngs) != batch:
        raise ContractError(f"need {batch} rng streams, got {len(rngs)}")
    return rngs


class MLSME:
    def __init__(self, ps: ParamStore, name: str, model: ModelConfig, cfg: MLSMEConfig):
        c = model.channels
        self.cfg = cfg
        self.frames = model.frames
        self.tokens = model.tokens
        self.tube_token = ps.normal(f"{name}.tube_token", (c,))
        self.patch_enc = MotionEncoder(ps, f"{name}.patch_enc", c, model.heads, cfg.n_div, model.expansion)
        self.frame_enc = None
        if cfg.frame_level:
            self.frame_token = ps.normal(f"{name}.frame_token", (c,))
            self.frame_enc = MotionEncoder(ps, f"{name}.frame_enc", c, model.heads, cfg.n_div,
                                           model.expansion)
        self.decoder = MotionDecoder(ps, f"{name}.decoder", model, cfg.decoder_layers)

    def sample_masks(self, rng, batch: int | None) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample tube and frame masks, shaped ``(B, L)``/``(B, T)`` or unbatched."""
        tubes, frames = [], []
        for g in _as_rngs(rng, batch):
            tubes.append(sample_tube_mask(self.tokens, self.cfg.mask_ratio, g).masked)
            if self.frame_enc is not None:
                frames.append(sample_frame_mask(self.frames, self.cfg.frame_mask_ratio, g,
                                                self.cfg.keyframe_maskable).masked)
            else:
                frames.append(np.zeros(self.frames, dtype=bool))
        if batch is None:
            return tubes[0], frames[0]
        return np.stack(tubes), np.stack(frames)

    def __call__(self, tokens: Tensor, ps: ParamStore, mode: str = "infer", rng=None,
                 masks: tuple[np.ndarray, np.ndarray] | None = None) -> MLSMEOutput:
        if mode not in ("train", "infer"):
            raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "infer":
            patch = self.patch_enc(tokens, ps)
            frame = self.frame_enc(patch, ps) if self.frame_enc is not None else None
            fused = fuse_motion(patch, frame) if frame is not None else patch
            return MLSMEOutput(MotionFeatures(patch, frame, fused))

        batch = tokens.shape[0] if tokens.ndim == 4 else None
        if masks is None:
            if rng is None:
                raise ContractError("train mode needs an rng or explicit masks")
            masks = self.sample_masks(rng, batch)
        tube, frame_mask = masks
        patch = self.patch_enc(apply_tube_mask(tokens, tube, ps[self.tube_token]), ps)
        if self.frame_enc is not None:
            frame = self.frame_enc(apply_frame_mask(patch, frame_mask, ps[self.frame_token]), ps)
            fused = fuse_motion(patch, frame)
            recon = self.decoder(frame, ps)
        else:
            frame, fused = None, patch
            recon = self.decoder(patch, ps)
        return MLSMEOutput(MotionFeatures(patch, frame, fused), recon, tube, frame_mask)


def mlsme_forward(module: MLSME, tokens: Tensor, ps: ParamStore, mode: str,
                  rng: np.random.Generator | Sequence[np.random.Generator] | None = None):
    """Returns ``(fused motion, Reconstruction or None)``."""
    out = module(tokens, ps, mode, rng)
    return out.motion.fused, out.recon
