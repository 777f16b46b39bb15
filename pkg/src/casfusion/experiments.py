"""Scaled sanity experiments: overfitting a handful of scenes and the ablation ordering."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data
from .config import RunConfig
from .evaluate import aggregate, evaluate_samples
from .train import EpochLog, Trainer

log = logging.getLogger(__name__)


def synthetic_samples(run: RunConfig, count: int, seed: int = 0) -> list[data.SceneSample]:
    return [data.make_sample(run.scene_spec(), seed, i, run.n_input, run.partial_method,
                             run.radius_factor)[0] for i in range(count)]


# -- overfitting ------------------------------------------------------------------

@dataclass
class OverfitResult:
    epochs: int
    seconds: float
    first_cd: float
    cd: float
    miou: float
    history: list[EpochLog] = field(default_factory=list)
    cd_ratio_target: float = 0.2
    miou_target: float = 0.8

    @property
    def cd_ratio(self) -> float:
        return self.cd / self.first_cd

    @property
    def passed(self) -> bool:
        return self.cd_ratio <= self.cd_ratio_target and self.miou >= self.miou_target


def overfit(run: RunConfig | None = None, scenes: int = 4, max_epochs: int = 300,
            time_limit: float = 1800.0, eval_every: int = 5, data_seed: int = 0,
            cd_ratio_target: float = 0.2, miou_target: float = 0.8) -> OverfitResult:
    """Train on ``scenes`` scenes until the CD ratio and mIoU targets are both met,
    ``max_epochs`` pass, or ``time_limit`` seconds elapse.

    Training CD is the last level's mean training Chamfer distance for an epoch;
    mIoU is measured on the same scenes from summed confusion matrices.
    """
    run = run or RunConfig(batch_size=1)
    samples = synthetic_samples(run, scenes, data_seed)
    trainer = Trainer(run, samples)
    start = time.perf_counter()
    history: list[EpochLog] = []
    miou = 0.0
    while trainer.epoch < max_epochs:
        entry = trainer.train_epoch()
        history.append(entry)
        ratio = entry.cd[-1] / history[0].cd[-1]
        elapsed = time.perf_counter() - start
        last = trainer.epoch >= max_epochs or elapsed >= time_limit
        if trainer.epoch % eval_every == 0 or ratio <= cd_ratio_target or last:
            miou = aggregate(evaluate_samples(trainer.net, samples, run.cd_mode)).miou
            log.info("epoch %d  %.0fs  cd %.5f (ratio %.3f)  miou %.3f", entry.epoch + 1, elapsed,
                     entry.cd[-1], ratio, miou)
            if ratio <= cd_ratio_target and miou >= miou_target:
                break
        if last:
            break
    return OverfitResult(epochs=trainer.epoch, seconds=time.perf_counter() - start,
                         first_cd=history[0].cd[-1], cd=history[-1].cd[-1], miou=miou,
                         history=history, cd_ratio_target=cd_ratio_target, miou_target=miou_target)


# -- ablation ordering -------------------------------------------------------------------

@dataclass
class AblationRun:
    model: str
    seed: int
    cd: float
    miou: float
    seconds: float


@dataclass
class AblationResult:
    runs: list[AblationRun]

    def get(self, model: str, seed: int) -> AblationRun:
        return next(r for r in self.runs if r.model == model and r.seed == seed)

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.runs})

    def wins(self, metric: str, better: str, worse: str) -> list[bool]:
        """Per seed, whether ``better`` beats or ties ``worse`` on ``metric``."""
        out = []
        for s in self.seeds:
            a, b = getattr(self.get(better, s), metric), getattr(self.get(worse, s), metric)
            out.append(a <= b if metric == "cd" else a >= b)
        return out

    def majority(self, metric: str, better: str, worse: str) -> bool:
        w = self.wins(metric, better, worse)
        return 2 * sum(w) > len(w)


def ablation(base: RunConfig | None = None, count: int = 64, seeds=(0, 1, 2), epochs: int = 16,
             models=("full", "A", "C"), data_seed: int = 0) -> AblationResult:
    """Train every model for the same number of epochs per seed on one synthetic
    dataset and score it on the held-out split."""
    base = base or RunConfig()
    samples = synthetic_samples(base, count, data_seed)
    splits = data.split_assignment(count, (base.train_ratio, 1.0 - base.train_ratio), data_seed)
    train = [s for s, sp in zip(samples, splits) if sp == "train"]
    test = [s for s, sp in zip(samples, splits) if sp == "test"]
    runs = []
    for seed in seeds:
        for model in models:
            run = replace(base, model=model, seed=seed, epochs=epochs).validate()
            start = time.perf_counter()
            trainer = Trainer(run, train)
            trainer.fit(epochs)
            total = aggregate(evaluate_samples(trainer.net, test, run.cd_mode))
            runs.append(AblationRun(model, seed, total.cd, total.miou, time.perf_counter() - start))
            log.info("seed %d model %s: cd %.5f miou %.3f (%.0fs)", seed, model, total.cd,
                     total.miou, runs[-1].seconds)
    return AblationResult(runs)
