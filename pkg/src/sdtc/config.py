"""Run configuration: nested dataclasses addressable by dotted keys.

Config files are UTF-8 lines of ``section.key = value`` with ``#`` comments.
Command-line overrides use the same syntax.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    img_h: int = 64
    img_w: int = 48
    patch: int = 8
    channels: int = 64
    heads: int = 4
    expansion: int = 4
    backbone_depth: int = 2
    num_joints: int = 15
    delta: int = 2
    heatmap_h: int = 16
    heatmap_w: int = 12
    spatial_pe: bool = True
    temporal_pe: bool = True
    pe_factorized: bool = True

    @property
    def frames(self) -> int:
        return 2 * self.delta + 1

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_h // self.patch, self.img_w // self.patch

    @property
    def tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def stride(self) -> float:
        return self.img_h / self.heatmap_h


@dataclass
class MLSMEConfig:
    # False swaps in a plain (unmasked, reconstruction-free) transformer motion encoder
    enabled: bool = True
    mask_ratio: float = 0.5
    frame_mask_ratio: float = 0.5
    frame_level: bool = True
    n_div: int = 2
    decoder_layers: int = 2
    keyframe_maskable: bool = True


@dataclass
class SMMLConfig:
    fusion: str = "smml"  # smml | add | conv
    self_refine: bool = True
    cross_propagate: bool = True
    adaptive_fuse: bool = True
    context_axis: str = "channel"  # channel | spatial
    refine_residual: bool = True
    norm: str = "spatial"  # spatial | none


@dataclass
class LossConfig:
    lam: float = 0.01
    sigma: float = 2.0
    visibility_masking: bool = True
    pose_rec_masked_only: bool = False
    pck_alpha: float = 0.2


@dataclass
class DataConfig:
    num_samples: int = 8
    canvas_h: int = 128
    canvas_w: int = 96
    max_step: float = 3.0
    occluders: int = 0
    occluder_coverage: float = 0.25
    occluder_frame_prob: float = 1.0
    blur: int = 0
    blur_frame_prob: float = 0.0
    augment: bool = False
    seed: int = 0


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    milestones: tuple[int, ...] = (20, 40)
    decay: float = 0.1
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0
    steps_per_epoch: int = 0  # 0: derived from dataset size and batch size


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mlsme: MLSMEConfig = field(default_factory=MLSMEConfig)
    smml: SMMLConfig = field(default_factory=SMMLConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> RunConfig:
        m = self.model
        if m.img_h % m.patch or m.img_w % m.patch:
            raise ConfigError("model.patch must divide image size")
        if m.channels % m.heads:
            raise ConfigError("model.channels must be divisible by model.heads")
        if m.heatmap_h % m.grid[0] or m.heatmap_w % m.grid[1]:
            raise ConfigError("heatmap size must be a multiple of the patch grid")
        if not 0 <= self.mlsme.mask_ratio < 1 or not 0 <= self.mlsme.frame_mask_ratio < 1:
            raise ConfigError("mask ratios must lie in [0, 1)")
        if self.smml.fusion not in ("smml", "add", "conv"):
            raise ConfigError(f"unknown smml.fusion {self.smml.fusion!r}")
        if self.smml.context_axis not in ("channel", "spatial"):
            raise ConfigError(f"unknown smml.context_axis {self.smml.context_axis!r}")
        if self.smml.norm not in ("spatial", "none"):
            raise ConfigError(f"unknown smml.norm {self.smml.norm!r}")
        if self.loss.lam < 0:
            raise ConfigError("loss.lam must be non-negative")
        ms = self.train.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("train.milestones must be strictly increasing")
        return self

    # -- dotted access -------------------------------------------------------
    def set(self, key: str, raw: str) -> None:
        section, _, name = key.strip().partition(".")
        sub = getattr(self, section, None) if section in _SECTIONS else None
        if sub is None or not name or name not in {f.name for f in dataclasses.fields(sub)}:
            raise ConfigError(f"unknown config key {key!r}")
        hint = typing.get_type_hints(type(sub))[name]
        setattr(sub, name, _coerce(raw.strip(), hint, key))

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in _SECTIONS:
            sub = getattr(self, section)
            for f in dataclasses.fields(sub):
                out.append((f"{section}.{f.name}", getattr(sub, f.name)))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())


_SECTIONS = ("model", "mlsme", "smml", "loss", "data", "train")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, hint, key: str):
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if typing.get_origin(hint) is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    raise ConfigError(f"unsupported type for {key}")


def parse_lines(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        cfg.set(key, value)
    return cfg


def load(path: str | Path | None = None, overrides: list[str] = (), env=os.environ) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``, then ``SDTC_SEED``."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        parse_lines(text, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key, value)
    seed = env.get("SDTC_SEED")
    if seed is not None:
        cfg.set("train.seed", seed)
    return cfg.validate()

