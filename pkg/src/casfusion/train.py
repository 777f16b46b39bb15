"""Epoch-based training loop with resumable state."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cascade import CasFusionNet
from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_text
from .data import SceneSample
from .objective import gamma_schedule, prepare_level_targets, total_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, sample_ids: Sequence[str]):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} ({', '.join(sample_ids)})")
        self.epoch = epoch
        self.batch = batch


@dataclass
class EpochLog:
    epoch: int
    lr: float
    gamma: float
    cd: list[float]
    sem: list[float]
    total: float = field(default=0.0)

    def row(self) -> list:
        return [self.epoch, self.lr, self.gamma, *self.cd, *self.sem, self.total]


def metrics_header(levels: int) -> list[str]:
    return (["epoch", "lr", "gamma"] + [f"cd_l{i}" for i in range(1, levels + 1)]
            + [f"sem_l{i}" for i in range(1, levels + 1)] + ["total"])


class Trainer:
    def __init__(self, run: RunConfig, samples: Sequence[SceneSample]):
        self.run = run
        self.cfg = run.network()
        self.train_cfg = run.training()
        self.samples = list(samples)
        self.net = CasFusionNet(self.cfg)
        self.names = [n for n, _ in self.net.named_parameters()]
        self.params = self.net.parameters()
        self.adam = T.AdamState()
        self.rng = np.random.default_rng(run.seed)
        self.epoch = 0
        sizes = self.cfg.level_sizes()
        self.targets = [prepare_level_targets(s.gt_points, s.gt_labels, sizes, run.seed,
                                              sample_key=s.key, pad=True) for s in self.samples]

    def schedule(self, epoch: int) -> tuple[float, float]:
        tc = self.train_cfg
        lr = T.lr_schedule(epoch, tc.lr, tc.lr_decay, tc.lr_decay_every)
        gamma = gamma_schedule(epoch, tc.gamma_start, tc.gamma_step, tc.gamma_period, tc.gamma_cap)
        return lr, gamma

    def sample_loss(self, i: int, gamma: float):
        out = self.net(self.samples[i].partial)
        preds = [(s.points, s.labels) for s in out.states[1:]]
        return total_loss(preds, self.targets[i], self.train_cfg.alpha, gamma, self.train_cfg.cd_mode)

    def train_epoch(self) -> EpochLog:
        lr, gamma = self.schedule(self.epoch)
        levels = self.cfg.levels
        cd = np.zeros(levels)
        sem = np.zeros(levels)
        total = 0.0
        order = self.rng.permutation(len(self.samples))
        bs = self.train_cfg.batch_size
        for b, start in enumerate(range(0, len(order), bs)):
            batch = order[start:start + bs]
            self.net.zero_grad()
            for i in batch:
                try:
                    lb = self.sample_loss(int(i), gamma)
                    value = lb.total.item()
                except FloatingPointError:
                    value = math.nan
                if not math.isfinite(value):
                    raise DivergenceError(self.epoch, b, [self.samples[j].sample_id for j in batch])
                T.backward(lb.total * (1.0 / len(batch)))
                cd += lb.cd
                sem += lb.sem
                total += value
            T.adam_step(self.params, [p.grad for p in self.params], self.adam, lr)
        n = len(self.samples)
        entry = EpochLog(self.epoch, lr, gamma, list(cd / n), list(sem / n), total / n)
        self.epoch += 1
        return entry

    def fit(self, epochs: int | None = None, on_epoch: Callable[[EpochLog], None] | None = None
            ) -> list[EpochLog]:
        history = []
        target = self.train_cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            entry = self.train_epoch()
            log.info("epoch %d lr %.6g gamma %.2f cd %s", entry.epoch, entry.lr, entry.gamma,
                     " ".join(f"{c:.5f}" for c in entry.cd))
            history.append(entry)
            if on_epoch:
                on_epoch(entry)
        return history

    # -- persistence ---------------------------------------------------------
    def train_state(self) -> TrainState:
        master = {n: p.data.copy() for n, p in zip(self.names, self.params)}
        return TrainState(adam=self.adam, epoch=self.epoch,
                          rng_state=self.rng.bit_generator.state, master=master)

    def save(self, path) -> None:
        save_checkpoint(path, self.run.to_text(), self.net.state_dict(), self.train_state())

    def restore(self, state: TrainState) -> None:
        self.net.load_state_dict(state.master)
        self.params = self.net.parameters()
        self.adam = state.adam
        self.epoch = state.epoch
        self.rng.bit_generator.state = state.rng_state

    @classmethod
    def resume(cls, path, samples: Sequence[SceneSample]) -> "Trainer":
        text, _, state = load_checkpoint(path)
        if state is None:
            raise ValueError(f"{path} has no training state to resume from")
        trainer = cls(parse_text(text), samples)
        trainer.restore(state)
        return trainer


def load_network(path) -> tuple[RunConfig, CasFusionNet]:
    """Build a network from a checkpoint's stored config and float32 weights."""
    text, params, _ = load_checkpoint(path)
    run = parse_text(text).validate()
    net = CasFusionNet(run.network())
    net.load_state_dict(params)
    return run, net


def write_metrics_csv(path, levels: int, history: Sequence[EpochLog], append: bool = False) -> None:
    path = Path(path)
    lines = []
    if not append or not path.exists():
        lines.append("# casfusion-train-metrics v1")
        lines.append(",".join(metrics_header(levels)))
    for entry in history:
        lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in entry.row()))
    if not lines:
        return
    with open(path, "a" if append else "w") as fh:
        fh.write("\n".join(lines) + "\n")
