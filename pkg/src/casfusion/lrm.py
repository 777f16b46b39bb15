"""Local refinement around the points that moved the most."""

from __future__ import annotations

import numpy as np

from . import geom
from . import tensor as T
from .layers import MLP, Module
from .tensor import Tensor


def select_agents(d_l, k: int) -> np.ndarray:
    """Indices of the ``k`` largest displacement norms, descending, ties to lowest index."""
    d = np.asarray(getattr(d_l, "data", d_l), dtype=np.float64)
    if not 0 <= k <= len(d):
        raise ValueError(f"cannot select {k} agents from {len(d)} displacements")
    norms = np.sqrt(np.einsum("ij,ij->i", d, d))
    return np.lexsort((np.arange(len(d)), -norms))[:k]


def agent_groups(p_g, agents: np.ndarray, n: int) -> np.ndarray:
    p = np.asarray(getattr(p_g, "data", p_g))
    return geom.knn(p[agents], p, min(n, len(p)))


class LocalRefinement(Module):
    """One refinement branch. ``f`` is 3 for coordinates or C for label rows."""

    def __init__(self, f: int, d: int, rng: np.random.Generator, n: int = 16,
                 use_values: bool = False):
        self.f = f
        self.n = n
        self.use_values = use_values
        self.mlp = MLP(3 + (f if use_values else 0), [d, d], rng, final_activation=True)
        self.head = MLP(d, [d, f], rng, zero_last=True)

    def __call__(self, x: Tensor, p_g: Tensor, agents: np.ndarray, groups: np.ndarray) -> Tensor:
        if x.shape[0] != len(p_g) or x.shape[1] != self.f:
            raise ValueError(f"lrm: values {x.shape} not aligned with {len(p_g)} points / f={self.f}")
        k = len(agents)
        if k == 0:
            return x
        centers = T.reshape(T.gather_rows(p_g, agents), (k, 1, 3))
        local = T.gather_rows(p_g, groups) - centers
        if self.use_values:
            local = T.concat([T.gather_rows(x, groups), local], axis=-1)
        pooled, _ = T.reduce_max(self.mlp(local), axis=1)
        tuned = T.gather_rows(x, agents) + self.head(pooled)
        return T.concat([x, tuned], axis=0)


def lrm_refine(branch: LocalRefinement, x: Tensor, p_g: Tensor, d_l, k: int) -> tuple[Tensor, np.ndarray]:
    """Refine ``x`` around the top-``k`` displaced points; returns (m + k rows, agent indices)."""
    agents = select_agents(d_l, k)
    groups = agent_groups(p_g, agents, branch.n)
    return branch(x, p_g, agents, groups), agents
