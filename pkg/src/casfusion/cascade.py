"""Level #0 bootstrap plus cascaded GCM -> SSM -> LRM levels."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geom
from . import tensor as T
from .gcm import GlobalCompletion
from .layers import MLP, Encoder, Module
from .lrm import LocalRefinement, agent_groups, select_agents
from .ssm import SemanticSegmentation
from .tensor import Tensor

# Ablation presets: A = no SSM/LRM, B = no LRM, C = no GCM<->SSM fusion,
# D = levels #0 and #1 only.
ABLATIONS = {
    "full": {},
    "A": {"disable_ssm": True, "disable_lrm": True},
    "B": {"disable_lrm": True},
    "C": {"disable_cross_fusion": True},
    "D": {"levels": 1},
}


@dataclass(frozen=True)
class NetworkConfig:
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
    init_seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.ratios) < self.levels or len(self.lrm_k) < self.levels:
            raise ValueError(f"need {self.levels} ratios and lrm_k entries, got "
                             f"{self.ratios} / {self.lrm_k}")
        if any(r < 1 for r in self.ratios) or any(k < 0 for k in self.lrm_k):
            raise ValueError("ratios must be >= 1 and lrm_k >= 0")

    def ratio(self, level: int) -> int:
        return self.ratios[level - 1]

    def k(self, level: int) -> int:
        return 0 if self.disable_lrm else self.lrm_k[level - 1]

    def level_sizes(self) -> list[int]:
        """Row counts of P_1 .. P_L (before any final FPS)."""
        sizes, m = [], self.n0
        for level in range(1, self.levels + 1):
            m = self.ratio(level) * m + self.k(level)
            sizes.append(m)
        return sizes

    def with_ablation(self, model: str) -> "NetworkConfig":
        if model not in ABLATIONS:
            raise ValueError(f"unknown ablation model {model!r}")
        return replace(self, **ABLATIONS[model])


@dataclass
class LevelState:
    points: Tensor
    labels: Tensor
    h_s: Tensor | None = None
    h_g: Tensor | None = None
    f_se: Tensor | None = None
    displacements: Tensor | None = None
    agents: np.ndarray | None = None

    def __post_init__(self):
        if len(self.points) != len(self.labels):
            raise AssertionError(f"{len(self.points)} points vs {len(self.labels)} label rows")


@dataclass
class NetworkOutput:
    points: Tensor
    labels: Tensor
    states: list[LevelState] = field(default_factory=list)
    scene: Tensor | None = None


class Level(Module):
    def __init__(self, cfg: NetworkConfig, level: int, rng: np.random.Generator):
        self.level = level
        self.ratio = cfg.ratio(level)
        self.k = cfg.k(level)
        self.cfg = cfg
        d, c = cfg.d, cfg.num_classes
        self.gcm = GlobalCompletion(d, self.ratio, rng, n_attn=cfg.n_knn, n_group=cfg.n_group)
        self.ssm = None if cfg.disable_ssm else SemanticSegmentation(
            d, c, self.ratio, rng, n_edge=cfg.n_knn, n_attn=cfg.n_knn)
        if self.k > 0:
            self.lrm_points = LocalRefinement(3, d, rng, n=cfg.n_group)
            self.lrm_labels = LocalRefinement(c, d, rng, n=cfg.n_group, use_values=True)

    def __call__(self, prev: LevelState, scene: Tensor) -> LevelState:
        cfg = self.cfg
        fused = not cfg.disable_cross_fusion
        first = self.level == 1
        f_in = scene if first else prev.f_se
        h_in = None if first else (prev.h_s if fused else prev.h_g)
        g = self.gcm(prev.points, f_in, h_in, encode=self.ssm is not None and fused)

        if self.ssm is None:
            labels, h_s = T.repeat_rows(prev.labels, self.ratio), None
        elif fused:
            s = self.ssm(prev.labels, g.f_g, g.h_g, g.p_g)
            labels, h_s = s.l_s, s.h_s
        else:
            m = len(prev.points)
            h_prev = (Tensor(np.zeros((self.ratio * m, cfg.d))) if prev.h_s is None
                      else T.repeat_rows(prev.h_s, self.ratio))
            s = self.ssm(prev.labels, scene, h_prev, g.p_g)
            labels, h_s = s.l_s, s.h_s

        points, h_g, agents = g.p_g, g.h_g, None
        if self.k > 0:
            agents = select_agents(g.d_l, self.k)
            groups = agent_groups(g.p_g, agents, cfg.n_group)
            points = self.lrm_points(g.p_g, g.p_g, agents, groups)
            labels = self.lrm_labels(labels, g.p_g, agents, groups)
            # appended agents inherit the hidden rows of the points they copy
            h_g = T.concat([h_g, T.gather_rows(h_g, agents)], axis=0)
            if h_s is not None:
                h_s = T.concat([h_s, T.gather_rows(h_s, agents)], axis=0)
        return LevelState(points=points, labels=labels, h_s=h_s, h_g=h_g,
                          displacements=g.d_l, agents=agents)


class CasFusionNet(Module):
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.encoder = Encoder(cfg.d, rng, n_group=cfg.n_group, n_attn=cfg.n_knn)
        self.label0 = MLP(3 + cfg.d, [cfg.d, cfg.num_classes], rng)
        self.shared_encoder = Encoder(cfg.d, rng, n_group=cfg.n_group, n_attn=cfg.n_knn)
        self.levels = [Level(cfg, level, rng) for level in range(1, cfg.levels + 1)]

    def level0(self, p_in) -> tuple[LevelState, Tensor]:
        p_in = p_in if isinstance(p_in, Tensor) else Tensor(p_in)
        if len(p_in) < self.cfg.n0:
            raise ValueError(f"input has {len(p_in)} points, level 0 needs at least {self.cfg.n0}")
        scene = self.encoder(p_in)
        idx = geom.farthest_point_sample(p_in.data, self.cfg.n0)
        p0 = T.gather_rows(p_in, idx)
        labels = self.label0(T.concat([p0, T.broadcast_rows(scene, len(p0))], axis=1))
        return LevelState(points=p0, labels=labels), scene

    def level_forward(self, prev: LevelState, scene: Tensor, level: int) -> LevelState:
        state = self.levels[level - 1](prev, scene)
        if level < self.cfg.levels:
            state.f_se = self.shared_encoder(state.points)
        return state

    def __call__(self, p_in) -> NetworkOutput:
        state, scene = self.level0(p_in)
        states = [state]
        for level in range(1, self.cfg.levels + 1):
            state = self.level_forward(state, scene, level)
            states.append(state)
        points, labels = state.points, state.labels
        if self.cfg.out_points > 0:
            idx = geom.farthest_point_sample(points.data, self.cfg.out_points)
            points, labels = T.gather_rows(points, idx), T.gather_rows(labels, idx)
        return NetworkOutput(points=points, labels=labels, states=states, scene=scene)
