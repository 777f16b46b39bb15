"""Training losses, per-level targets, focal schedule and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geom
from . import tensor as T
from .geom import Correspondence
from .tensor import Tensor

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class TrainingConfig:
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
    seed: int = 0
    aux_level0: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 <= self.gamma_start <= self.gamma_cap <= 5.0:
            raise ValueError("gamma must stay within [0, 5]")
        if self.cd_mode not in ("L1", "L2"):
            raise ValueError(f"cd_mode must be L1 or L2, got {self.cd_mode!r}")


def gamma_schedule(epoch: int, start: float = 0.0, step: float = 0.5, period: int = 30,
                   cap: float = 5.0) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return min(cap, start + step * (epoch // period))


def prepare_level_targets(gt_points, gt_labels, level_sizes: Sequence[int], seed: int,
                          sample_key: int = 0, pad: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """Uniformly downsample the ground truth to every level's output size.

    Sizes above ``len(gt_points)`` raise unless ``pad`` is set, in which case the
    excess is drawn with replacement.
    """
    n = len(gt_points)
    targets = []
    for level, size in enumerate(level_sizes, start=1):
        if size > n and not pad:
            raise ValueError(f"level {level} needs {size} target points but ground truth has {n}")
        level_seed = np.random.SeedSequence([seed, sample_key, level]).generate_state(1)[0]
        targets.append(geom.uniform_downsample(gt_points, gt_labels, size, int(level_seed),
                                               replace_excess=pad))
    return targets


def cd_loss(pred: Tensor, target, mode: str = "L1") -> tuple[Tensor, Correspondence]:
    """Differentiable Chamfer distance; nearest indices are fixed for the pass."""
    target = np.asarray(target, dtype=np.float64)
    if len(pred) == 0 or len(target) == 0:
        raise ValueError("cd_loss needs two nonempty point sets")
    corr = geom.correspondence(pred.data, target)
    forward = pred - target[corr.a_to_b]
    reverse = T.gather_rows(pred, corr.b_to_a) - target
    if mode == "L1":
        value = T.mean(T.norm(forward)) + T.mean(T.norm(reverse))
    elif mode == "L2":
        value = T.mean(T.sum(forward * forward, axis=1)) + T.mean(T.sum(reverse * reverse, axis=1))
    else:
        raise ValueError(f"unknown chamfer mode {mode!r}")
    return value, corr


def sem_loss(scores: Tensor, corr: Correspondence, gt_labels, gamma: float) -> Tensor:
    """Focal loss against the class of each predicted point's nearest ground-truth point."""
    gt_labels = np.asarray(gt_labels)
    classes = gt_labels[corr.a_to_b]
    c = scores.shape[1]
    if np.any(classes >= c) or np.any(classes < 0):
        raise ValueError(f"ground-truth class index outside [0, {c})")
    l = T.clamp(T.pick(T.softmax_rows(scores), classes), PROB_FLOOR, 1.0)
    return T.mean(-(T.power(1.0 - l, gamma) * T.log(l)))


def focal_value(l: float, gamma: float) -> float:
    return -((1.0 - l) ** gamma) * math.log(l)


@dataclass
class LossBreakdown:
    total: Tensor
    cd: list[float] = field(default_factory=list)
    sem: list[float] = field(default_factory=list)


def total_loss(level_preds: Sequence[tuple[Tensor, Tensor]],
               level_targets: Sequence[tuple[np.ndarray, np.ndarray]],
               alpha: float, gamma: float, mode: str = "L1") -> LossBreakdown:
    """Sum over levels of CD + alpha * focal loss (level #0 excluded by the caller)."""
    if len(level_preds) != len(level_targets):
        raise ValueError(f"{len(level_preds)} levels of predictions vs {len(level_targets)} targets")
    out = LossBreakdown(total=Tensor(0.0))
    terms = []
    for (points, labels), (tp, tl) in zip(level_preds, level_targets):
        cd, corr = cd_loss(points, tp, mode)
        sem = sem_loss(labels, corr, tl, gamma)
        out.cd.append(cd.item())
        out.sem.append(sem.item())
        terms.append(cd + sem * alpha if alpha > 0 else cd)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    out.total = total
    return out


# -- evaluation ---------------------------------------------------------------

def confusion_matrix(reference, predicted, num_classes: int) -> np.ndarray:
    reference = np.asarray(reference, dtype=np.intp)
    predicted = np.asarray(predicted, dtype=np.intp)
    flat = reference * num_classes + predicted
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def class_scores(conf: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class IoU and recall plus the mask of classes present in the reference."""
    tp = np.diag(conf).astype(np.float64)
    ref = conf.sum(axis=1)
    pred = conf.sum(axis=0)
    present = ref > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (ref + pred - tp), np.nan)
        recall = np.where(present, tp / ref, np.nan)
    return iou, recall, present


def miou_macc(conf: np.ndarray) -> tuple[float, float]:
    iou, recall, present = class_scores(conf)
    if not present.any():
        return float("nan"), float("nan")
    return float(iou[present].mean()), float(recall[present].mean())


@dataclass
class Metrics:
    cd: float
    miou: float
    macc: float
    confusion: np.ndarray

    @property
    def class_iou(self) -> np.ndarray:
        return class_scores(self.confusion)[0]


def eval_metrics(pred_points, pred_labels, gt_points, gt_labels, mode: str = "L1",
                 num_classes: int | None = None) -> Metrics:
    """CD plus mIoU / mAcc with labels transferred from each prediction's nearest gt point.

    ``pred_labels`` may be an m x C score matrix (argmax taken) or class indices.
    """
    pred_points = np.asarray(getattr(pred_points, "data", pred_points))
    pred_labels = np.asarray(getattr(pred_labels, "data", pred_labels))
    gt_labels = np.asarray(gt_labels)
    if len(pred_points) == 0 or len(gt_points) == 0:
        raise ValueError("eval_metrics needs nonempty point sets")
    cd, corr = geom.chamfer(pred_points, gt_points, mode)
    if pred_labels.ndim == 2:
        num_classes = num_classes or pred_labels.shape[1]
        predicted = np.argmax(pred_labels, axis=1)
    else:
        predicted = pred_labels.astype(np.intp)
        num_classes = num_classes or int(max(predicted.max(), gt_labels.max()) + 1)
    conf = confusion_matrix(gt_labels[corr.a_to_b], predicted, num_classes)
    miou, macc = miou_macc(conf)
    return Metrics(cd=cd, miou=miou, macc=macc, confusion=conf)
