"""Point-network building blocks on top of :mod:`casfusion.tensor`."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import geom
from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; attributes that are Tensors/Modules/lists are walked."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: expected shape {p.data.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w, b = np.zeros((d_in, d_out)), np.zeros(d_out)
        else:
            # nonzero bias keeps zero offsets (self neighbors) off the ReLU kink
            w = T.xavier_uniform(rng, d_in, d_out)
            b = rng.uniform(-1.0, 1.0, size=d_out) / np.sqrt(d_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"linear expects width {self.weight.shape[0]}, got {x.shape}")
        return T.linear(x, self.weight, self.bias)


class MLP(Module):
    """Shared pointwise stack; ReLU between layers, the last layer is linear
    unless ``final_activation`` is set."""

    def __init__(self, d_in: int, widths: Sequence[int], rng: np.random.Generator,
                 final_activation: bool = False, zero_last: bool = False):
        if not widths:
            raise ValueError("mlp needs at least one layer width")
        dims = [d_in, *widths]
        self.layers = [Linear(dims[i], dims[i + 1], rng, zero=zero_last and i == len(widths) - 1)
                       for i in range(len(widths))]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if x.shape[-1] != layer.weight.shape[0]:
                raise ValueError(f"mlp layer {i} expects width {layer.weight.shape[0]}, got {x.shape}")
            x = T.linear(x, layer.weight, layer.bias, activation=i < last or self.final_activation)
        return x


def _points(points) -> Tensor:
    return points if isinstance(points, Tensor) else Tensor(points)


class SetAbstraction(Module):
    """FPS to ``m_out`` centers, kNN groups in local frames, per-group MLP, max-pool."""

    def __init__(self, d_in: int, widths: Sequence[int], rng: np.random.Generator, n: int = 16):
        self.n = n
        self.mlp = MLP(3 + d_in, widths, rng, final_activation=True)

    def __call__(self, points, feats: Tensor, m_out: int) -> tuple[Tensor, Tensor]:
        points = _points(points)
        m = len(points)
        n = min(self.n, m)
        centers = geom.farthest_point_sample(points.data, m_out)
        nbr = geom.knn(points.data[centers], points.data, n)
        new_points = T.gather_rows(points, centers)
        rel = T.gather_rows(points, nbr) - T.reshape(new_points, (m_out, 1, 3))
        grouped = T.concat([rel, T.gather_rows(feats, nbr)], axis=-1)
        pooled, _ = T.reduce_max(self.mlp(grouped), axis=1)
        return new_points, pooled


class PointTransformer(Module):
    """Vector self-attention over each point's kNN neighborhood, with residual."""

    def __init__(self, d: int, rng: np.random.Generator, n: int = 8):
        self.n = n
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.pos = MLP(3, [d, d], rng)
        self.attn = MLP(d, [d, d], rng)

    def weights(self, points, feats: Tensor) -> tuple[Tensor, np.ndarray, Tensor, Tensor]:
        points = _points(points)
        m = len(points)
        if feats.shape[0] != m:
            raise ValueError(f"point transformer: {m} points but {feats.shape[0]} feature rows")
        n = min(self.n, m)
        nbr = geom.knn(points.data, points.data, n)
        rel = T.gather_rows(points, nbr) - T.reshape(points, (m, 1, 3))
        delta = self.pos(rel)
        q = T.reshape(self.q(feats), (m, 1, -1))
        k = T.gather_rows(self.k(feats), nbr)
        v = T.gather_rows(self.v(feats), nbr)
        attn = T.softmax(self.attn(q - k + delta), axis=1)
        return attn, nbr, v, delta

    def __call__(self, points, feats: Tensor) -> Tensor:
        attn, _, v, delta = self.weights(points, feats)
        return feats + T.sum(attn * (v + delta), axis=1)


class EdgeConv(Module):
    """Dynamic-graph edge convolution: kNN in feature space, MLP on [f_i, f_j - f_i], max."""

    def __init__(self, d_in: int, widths: Sequence[int], rng: np.random.Generator, n: int = 8):
        self.n = n
        self.mlp = MLP(2 * d_in, widths, rng, final_activation=True)

    def neighbors(self, feats: Tensor) -> np.ndarray:
        return geom.knn(feats.data, feats.data, min(self.n, feats.shape[0]))

    def __call__(self, feats: Tensor) -> Tensor:
        m, d = feats.shape
        nbr = self.neighbors(feats)
        center = T.reshape(feats, (m, 1, d))
        edge = T.gather_rows(feats, nbr) - center
        center = T.gather_rows(feats, np.repeat(np.arange(m)[:, None], nbr.shape[1], axis=1))
        out, _ = T.reduce_max(self.mlp(T.concat([center, edge], axis=-1)), axis=1)
        return out


class AttentionFuse(Module):
    """Single-head cross-attention (queries from ``a``, keys/values from ``b``) with residual."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)

    def weights(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[-1] != self.d or b.shape[-1] != self.d:
            raise ValueError(f"attention_fuse widths {a.shape} vs {b.shape}, expected {self.d}")
        logits = T.matmul(self.q(a), T.transpose(self.k(b))) * (1.0 / np.sqrt(self.d))
        return T.softmax_rows(logits)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        return a + T.matmul(self.weights(a, b), self.v(b))


class SnowflakeUpsample(Module):
    """Each parent spawns ``ratio`` children ``parent + MLP([parent, e_j])``.

    Children of parent ``i`` occupy rows ``i*ratio .. i*ratio+ratio-1``.
    """

    def __init__(self, d: int, ratio: int, rng: np.random.Generator):
        if ratio < 1:
            raise ValueError(f"upsampling ratio must be >= 1, got {ratio}")
        self.ratio = ratio
        self.embed = Tensor(rng.normal(0.0, 1.0, size=(ratio, d)), requires_grad=True)
        self.mlp = MLP(2 * d, [d, d], rng)

    def __call__(self, feats: Tensor) -> Tensor:
        m, d = feats.shape
        parents = T.repeat_rows(feats, self.ratio)
        branch = T.gather_rows(self.embed, np.tile(np.arange(self.ratio), m))
        return parents + self.mlp(T.concat([parents, branch], axis=-1))


class Encoder(Module):
    """Scene-wise feature extractor: two set-abstraction stages (m -> m/2 -> m/4),
    each followed by a point transformer, then a global max-pool to 1 x d."""

    def __init__(self, d: int, rng: np.random.Generator, n_group: int = 16, n_attn: int = 8):
        self.sa1 = SetAbstraction(3, [d, d], rng, n=n_group)
        self.pt1 = PointTransformer(d, rng, n=n_attn)
        self.sa2 = SetAbstraction(d, [d, d], rng, n=n_group)
        self.pt2 = PointTransformer(d, rng, n=n_attn)
        self.out = Linear(d, d, rng)

    def __call__(self, points) -> Tensor:
        points = _points(points)
        m = len(points)
        p1, f1 = self.sa1(points, points, max(1, m // 2))
        f1 = self.pt1(p1, f1)
        p2, f2 = self.sa2(p1, f1, max(1, m // 4))
        f2 = self.pt2(p2, f2)
        pooled, _ = T.reduce_max(f2, axis=0, keepdims=True)
        return self.out(pooled)
