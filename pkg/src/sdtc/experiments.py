"""Desk-scale learning checks shared by the scripts and the acceptance tests."""

from __future__ import annotations

import copy
import dataclasses
import statistics
import time
from dataclasses import dataclass, field

from .config import RunConfig
from .data import generate_dataset
from .losses import PCKReport
from .train import EpochLog, Trainer, evaluate


@dataclass
class OverfitResult:
    initial_l_h: float
    final_l_h: float
    pck: float
    steps: int
    seconds: float
    logs: list[EpochLog]

    @property
    def ratio(self) -> float:
        return self.final_l_h / self.initial_l_h


def overfit(cfg: RunConfig | None = None, samples: int = 8, steps: int = 300) -> OverfitResult:
    """Train on a tiny set with a constant learning rate and score that same set.

    Initial and final ``L_H`` are means over the first and last epoch so every
    sample contributes to both.
    """
    cfg = copy.deepcopy(cfg or RunConfig())
    cfg.train.milestones = ()
    cfg.data.augment = False
    data = generate_dataset(samples, cfg.model, cfg.data)
    trainer = Trainer(cfg)
    spe = trainer.steps_per_epoch(samples)
    if steps % spe:
        raise ValueError(f"steps={steps} is not a whole number of {spe}-step epochs")
    t0 = time.perf_counter()
    logs = trainer.fit(data, epochs=steps // spe)
    seconds = time.perf_counter() - t0
    return OverfitResult(logs[0].L_H, logs[-1].L_H, evaluate(trainer.model, data).mean,
                         trainer.step, seconds, logs)


# baseline: unmasked plain transformer motion encoder, fusion by addition
BASELINE = ("mlsme.enabled=false", "smml.fusion=add")


@dataclass
class AblationResult:
    full: list[float] = field(default_factory=list)
    baseline: list[float] = field(default_factory=list)
    reports: dict[str, list[PCKReport]] = field(default_factory=dict)

    @property
    def full_median(self) -> float:
        return statistics.median(self.full)

    @property
    def baseline_median(self) -> float:
        return statistics.median(self.baseline)

    def format(self) -> str:
        fmt = " ".join
        return (f"full     pck={fmt(f'{100 * v:.2f}' for v in self.full)} "
                f"median={100 * self.full_median:.2f}\n"
                f"baseline pck={fmt(f'{100 * v:.2f}' for v in self.baseline)} "
                f"median={100 * self.baseline_median:.2f}\n")


def ablation_config(seed: int, baseline: bool, base: RunConfig | None = None) -> RunConfig:
    cfg = copy.deepcopy(base or ablation_base())
    cfg.train.seed = seed
    if baseline:
        for item in BASELINE:
            key, value = item.split("=")
            cfg.set(key, value)
    return cfg.validate()


def ablation_base() -> RunConfig:
    cfg = RunConfig()
    cfg.data = dataclasses.replace(cfg.data, occluders=2, occluder_coverage=0.25,
                                   occluder_frame_prob=0.6, augment=True)
    cfg.train = dataclasses.replace(cfg.train, epochs=25, milestones=(15, 22))
    return cfg


def ablation(seeds=(0, 1, 2), train_samples: int = 32, val_samples: int = 48,
             base: RunConfig | None = None, log=None) -> AblationResult:
    """Full model vs the baseline, same data and schedule, PCK on an occluded validation set.

    Training and validation sets come from disjoint generator seeds.
    """
    base = base or ablation_base()
    train_data_cfg = base.data
    val_data_cfg = dataclasses.replace(base.data, seed=base.data.seed + 1)
    train = generate_dataset(train_samples, base.model, train_data_cfg)
    val = generate_dataset(val_samples, base.model, val_data_cfg)
    result = AblationResult(reports={"full": [], "baseline": []})
    for seed in seeds:
        for name, is_base in (("full", False), ("baseline", True)):
            cfg = ablation_config(seed, is_base, base)
            trainer = Trainer(cfg)
            t0 = time.perf_counter()
            trainer.fit(train, eval_each_epoch=False)
            report = evaluate(trainer.model, val)
            getattr(result, name).append(report.mean)
            result.reports[name].append(report)
            if log is not None:
                log(f"seed={seed} {name} pck={100 * report.mean:.2f} "
                    f"seconds={time.perf_counter() - t0:.0f}")
    return result

