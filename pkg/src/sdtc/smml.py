"""Spatial-motion mutual learning and the heatmap head.

All maps here are ``(..., C, HW)``: channels by flattened feature-grid
positions. Every convolution except the ``3 x 3`` ones inside the
conv-norm-ReLU transforms and the detection head is pointwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import nn
from . import tensor as tn
from .config import ModelConfig, SMMLConfig
from .nn import Conv, Conv1x1, ParamStore, SpatialNorm
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class ContextSet:
    regions: Tensor  # O, (..., C, HW)
    contexts: Tensor  # OC, (..., C, C)


@dataclass
class FusionGates:
    a: Tensor
    a_s: Tensor
    a_m: Tensor


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def to_grid(x: Tensor, grid: tuple[int, int]) -> Tensor:
    gh, gw = grid
    if gh * gw != x.shape[-1]:
        raise ContractError(f"grid {grid} does not cover {x.shape[-1]} positions")
    return x.reshape(*x.shape[:-1], gh, gw)


def aggregate(seq: Tensor, conv: Conv1x1, ps: ParamStore) -> Tensor:
    """``(..., T, L, C)`` -> ``(..., C, L)``: channel-concat the frames, then a 1x1 conv."""
    *lead, t, l, c = seq.shape
    nl = len(lead)
    stacked = seq.transpose(*range(nl), nl, nl + 2, nl + 1).reshape(*lead, t * c, l)
    return conv(stacked, ps)


def context_maps(x: Tensor, axis: str = "channel") -> Tensor:
    """Soft regions: softmax of ``x`` over channels (default) or positions."""
    return tn.softmax(x, axis=-2 if axis == "channel" else -1)


def context_features(x: Tensor, regions: Tensor) -> Tensor:
    _same_shape(x, regions, "context_features")
    return tn.matmul(x, regions.T)


def pixel_context_relations(x: Tensor, contexts: Tensor) -> Tensor:
    """``(..., HW, C)`` rows: each position's distribution over the C context features."""
    return tn.softmax(tn.matmul(x.T, contexts), axis=-1)


class SelfRefine:
    def __init__(self, ps, name, c, axis="channel", residual=True):
        self.axis = axis
        self.residual = residual
        self.conv = Conv1x1(ps, f"{name}.conv", c, c)

    def contexts(self, x: Tensor) -> ContextSet:
        regions = context_maps(x, self.axis)
        return ContextSet(regions, context_features(x, regions))

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        oc = self.contexts(x).contexts
        rel = pixel_context_relations(x, oc)
        out = self.conv(tn.matmul(rel, oc.T).T, ps)
        return x + out if self.residual else out


class ConvNormReLU:
    """Conv -> per-channel spatial normalisation -> ReLU on ``(..., C, HW)`` maps."""

    def __init__(self, ps, name, c_in, c_out, grid, k=3, norm="spatial"):
        self.grid = grid
        self.k = k
        self.conv = Conv(ps, f"{name}.conv", c_in, c_out, k) if k > 1 else Conv1x1(
            ps, f"{name}.conv", c_in, c_out)
        self.norm = SpatialNorm(ps, f"{name}.norm", c_out) if norm == "spatial" else None

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        if self.k > 1:
            y = self.conv(to_grid(x, self.grid), ps)
            y = y.reshape(*y.shape[:-2], y.shape[-2] * y.shape[-1])
        else:
            y = self.conv(x, ps)
        if self.norm is not None:
            y = self.norm(y, ps)
        return tn.relu(y)


class SMCA:
    """Single-head cross-attention: queries from the source, keys/values from the guidance."""

    def __init__(self, ps, name, c, grid, norm="spatial"):
        self.scale = 1.0 / math.sqrt(c)
        self.q = Conv1x1(ps, f"{name}.q", c, c)
        self.k = Conv1x1(ps, f"{name}.k", c, c)
        self.v = Conv1x1(ps, f"{name}.v", c, c)
        self.phi = ConvNormReLU(ps, f"{name}.phi", c, c, grid, 3, norm)

    def attend(self, source: Tensor, guidance: Tensor, ps: ParamStore):
        """Attention output ``(..., C, HW)`` and weights ``(..., HW, HW)``."""
        _same_shape(source, guidance, "smca")
        q = self.q(source, ps).T
        k = self.k(guidance, ps).T
        v = self.v(guidance, ps).T
        out, weights = nn.attention(q, k, v, self.scale)
        return out.T, weights

    def __call__(self, source: Tensor, guidance: Tensor, ps: ParamStore) -> Tensor:
        att, _ = self.attend(source, guidance, ps)
        return self.phi(source + att, ps)


class AdaptiveFuse:
    def __init__(self, ps, name, c, grid, norm="spatial"):
        self.mix = ConvNormReLU(ps, f"{name}.mix", 2 * c, c, grid, 1, norm)
        self.fc_s = Conv1x1(ps, f"{name}.fc_s", c, c)
        self.fc_m = Conv1x1(ps, f"{name}.fc_m", c, c)
        self.conv_s = Conv1x1(ps, f"{name}.conv_s", c, c)
        self.conv_m = Conv1x1(ps, f"{name}.conv_m", c, c)

    def gates(self, r: Tensor, m: Tensor, ps: ParamStore) -> FusionGates:
        _same_shape(r, m, "adaptive_fuse")
        a = self.mix(tn.concat([r, m], axis=-2), ps)
        return FusionGates(a, tn.sigmoid(self.fc_s(a, ps)), tn.sigmoid(self.fc_m(a, ps)))

    def __call__(self, r: Tensor, m: Tensor, ps: ParamStore) -> Tensor:
        g = self.gates(r, m, ps)
        return g.a_s * self.conv_s(r, ps) + g.a_m * self.conv_m(m, ps)


class DetectionHead:
    def __init__(self, ps, name, model: ModelConfig):
        self.grid = model.grid
        self.out = (model.heatmap_h, model.heatmap_w)
        self.conv = Conv(ps, f"{name}.conv", model.channels, model.num_joints, 3)

    def __call__(self, f: Tensor, ps: ParamStore) -> Tensor:
        x = nn.upsample_bilinear(to_grid(f, self.grid), self.out)
        return self.conv(x, ps)


class SMML:
    """Self refinement, cross propagation and adaptive fusion, each switchable.

    ``fusion='add'`` and ``fusion='conv'`` replace the whole module by plain
    addition or a conv-norm-ReLU over the channel concatenation.
    """

    def __init__(self, ps: ParamStore, name: str, model: ModelConfig, cfg: SMMLConfig):
        c, grid = model.channels, model.grid
        self.cfg = cfg
        self.agg_r = Conv1x1(ps, f"{name}.agg_spatial", model.frames * c, c)
        self.agg_m = Conv1x1(ps, f"{name}.agg_motion", model.frames * c, c)
        self.refine_r = self.refine_m = None
        self.smca_r = self.smca_m = None
        self.fuse = None
        self.conv_fuse = None
        if cfg.fusion == "conv":
            self.conv_fuse = ConvNormReLU(ps, f"{name}.conv_fuse", 2 * c, c, grid, 3, cfg.norm)
        elif cfg.fusion == "smml":
            if cfg.self_refine:
                self.refine_r = SelfRefine(ps, f"{name}.refine_spatial", c, cfg.context_axis,
                                           cfg.refine_residual)
                self.refine_m = SelfRefine(ps, f"{name}.refine_motion", c, cfg.context_axis,
                                           cfg.refine_residual)
            if cfg.cross_propagate:
                self.smca_r = SMCA(ps, f"{name}.smca_spatial", c, grid, cfg.norm)
                self.smca_m = SMCA(ps, f"{name}.smca_motion", c, grid, cfg.norm)
            if cfg.adaptive_fuse:
                self.fuse = AdaptiveFuse(ps, f"{name}.fuse", c, grid, cfg.norm)

    def __call__(self, spatial: Tensor, motion: Tensor, ps: ParamStore) -> Tensor:
        r = aggregate(spatial, self.agg_r, ps)
        m = aggregate(motion, self.agg_m, ps)
        if self.conv_fuse is not None:
            return self.conv_fuse(tn.concat([r, m], axis=-2), ps)
        if self.refine_r is not None:
            r, m = self.refine_r(r, ps), self.refine_m(m, ps)
        if self.smca_r is not None:
            r, m = cross_propagate(r, m, self.smca_r, self.smca_m, ps)
        if self.fuse is not None:
            return self.fuse(r, m, ps)
        return r + m


def cross_propagate(r: Tensor, m: Tensor, smca_r: SMCA, smca_m: SMCA, ps: ParamStore):
    """Both directions read the pre-update inputs."""
    _same_shape(r, m, "cross_propagate")
    return smca_r(r, m, ps), smca_m(m, r, ps)
