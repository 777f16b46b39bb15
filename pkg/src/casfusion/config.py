"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .cascade import ABLATIONS, NetworkConfig
from .data import SceneSpec
from .objective import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # network
    levels: int = 3
    ratios: tuple[int, ...] = (2, 2, 2)
    lrm_k: tuple[int, ...] = (48, 32, 0)
    d: int = 64
    num_classes: int = 8
    n_knn: int = 8
    n_group: int = 16
    n0: int = 512
    out_points: int = 0
    disable_lrm: bool = False
    disable_ssm: bool = False
    disable_cross_fusion: bool = False
    model: str = "full"
    # training
    alpha: float = 0.1
    gamma_start: float = 0.0
    gamma_step: float = 0.5
    gamma_period: int = 30
    gamma_cap: float = 5.0
    epochs: int = 400
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay: float = 0.99
    lr_decay_every: int = 2
    cd_mode: str = "L1"
    checkpoint_every: int = 10
    # data
    n_input: int = 1024
    n_gt: int = 4608
    train_ratio: float = 0.8
    count: int = 10
    sample_format: str = "binary"
    partial_method: str = "fps"
    radius_factor: float = 1000.0
    walls: int = 2
    # run
    seed: int = 0
    data: str = ""
    out: str = ""

    def network(self) -> NetworkConfig:
        cfg = NetworkConfig(
            levels=self.levels, ratios=tuple(self.ratios), lrm_k=tuple(self.lrm_k), d=self.d,
            num_classes=self.num_classes, n_knn=self.n_knn, n_group=self.n_group, n0=self.n0,
            out_points=self.out_points, disable_lrm=self.disable_lrm, disable_ssm=self.disable_ssm,
            disable_cross_fusion=self.disable_cross_fusion, init_seed=self.seed)
        return cfg.with_ablation(self.model) if self.model != "full" else cfg

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            alpha=self.alpha, gamma_start=self.gamma_start, gamma_step=self.gamma_step,
            gamma_period=self.gamma_period, gamma_cap=self.gamma_cap, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every, cd_mode=self.cd_mode, seed=self.seed)

    def scene_spec(self) -> SceneSpec:
        base = SceneSpec()
        furniture = {c: n for c, n in base.furniture.items() if c < self.num_classes}
        return SceneSpec(walls=self.walls, furniture=furniture, num_classes=self.num_classes,
                         points=self.n_gt)

    def validate(self) -> "RunConfig":
        if self.model not in ABLATIONS:
            raise ConfigError(f"model: unknown ablation preset {self.model!r}")
        if self.n_input < self.n0:
            raise ConfigError(f"n0={self.n0} exceeds n_input={self.n_input}")
        try:
            self.network()
            self.training()
            self.scene_spec().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(name: str, default, raw: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, getattr(RunConfig(), key), raw))
    return cfg


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected key = value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v
    return parse_pairs(pairs, base)


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_text(text, cfg)
    if overrides:
        cfg = parse_pairs(overrides, cfg)
    return cfg.validate()
