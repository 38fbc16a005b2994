"""Full pose network: per-frame token backbone, motion encoder, fusion, head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .mlsme import MLSME, MLSMEOutput, MotionFeatures, PlainMotionEncoder
from .nn import ParamStore, PatchEmbed, PositionalEncodings, TransformerBlock
from .smml import SMML, DetectionHead
from .tensor import Tensor


@dataclass
class ModelOutput:
    heatmaps: Tensor  # (B, K, H', W') keyframe prediction
    spatial: Tensor  # (B, T, L, C) backbone tokens with positional encodings
    motion: MLSMEOutput


class SDTCModel:
    def __init__(self, cfg: RunConfig, seed: int | None = None, dtype=np.float32):
        self.cfg = cfg
        m = cfg.model
        self.ps = ParamStore(cfg.train.seed if seed is None else seed, dtype)
        ps = self.ps
        self.embed = PatchEmbed(ps, "backbone.patch_embed", m.patch, m.channels)
        self.backbone = [TransformerBlock(ps, f"backbone.block{i}", m.channels, m.heads, m.expansion)
                         for i in range(m.backbone_depth)]
        self.pos = PositionalEncodings(ps, "pos", m.grid, m.channels, m.frames,
                                       m.spatial_pe, m.temporal_pe, m.pe_factorized)
        if cfg.mlsme.enabled:
            self.motion = MLSME(ps, "mlsme", m, cfg.mlsme)
        else:
            self.motion = PlainMotionEncoder(ps, "plain_motion", m.channels, m.heads,
                                             1 + cfg.mlsme.n_div, m.expansion)
        self.smml = SMML(ps, "smml", m, cfg.smml)
        self.head = DetectionHead(ps, "head", m)

    def tokens(self, frames: Tensor, ps: ParamStore) -> Tensor:
        """``(B, T, 3, H, W)`` frames -> ``(B, T, L, C)`` spatial features."""
        x = self.embed(frames, ps)
        for block in self.backbone:
            x = block(x, ps)
        return self.pos(x, ps)

    def forward(self, frames, ps: ParamStore | None = None, mode: str = "infer", rng=None,
                masks=None) -> ModelOutput:
        ps = ps or self.ps
        if not isinstance(frames, Tensor):
            frames = Tensor(np.asarray(frames), dtype=ps.dtype)
        spatial = self.tokens(frames, ps)
        if isinstance(self.motion, MLSME):
            mot = self.motion(spatial, ps, mode, rng, masks)
        else:
            fused = self.motion(spatial, ps)
            mot = MLSMEOutput(MotionFeatures(fused, None, fused))
        fused = self.smml(spatial, mot.motion.fused, ps)
        return ModelOutput(self.head(fused, ps), spatial, mot)

    __call__ = forward
