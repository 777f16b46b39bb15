"""Per-sample and aggregate evaluation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .cascade import CasFusionNet, NetworkConfig
from .data import SceneSample
from .objective import Metrics, eval_metrics, miou_macc

CSV_VERSION = "# casfusion-metrics v1"


@dataclass
class SampleResult:
    sample_id: str
    metrics: Metrics
    points: int


def predict(net: CasFusionNet, partial, final_fps: bool = True):
    """Completed points and class scores as numpy arrays."""
    cfg = net.cfg
    if not final_fps and cfg.out_points:
        net.cfg = replace(cfg, out_points=0)
    try:
        with T.no_grad():
            out = net(partial)
    finally:
        net.cfg = cfg
    return out.points.data, out.labels.data


def evaluate_samples(net: CasFusionNet, samples: Sequence[SceneSample], mode: str = "L1",
                     final_fps: bool = True, gt_as_prediction: bool = False) -> list[SampleResult]:
    results = []
    c = net.cfg.num_classes
    for s in samples:
        if gt_as_prediction:
            pts, labels = s.gt_points, s.gt_labels
        else:
            pts, labels = predict(net, s.partial, final_fps)
        m = eval_metrics(pts, labels, s.gt_points, s.gt_labels, mode, num_classes=c)
        results.append(SampleResult(s.sample_id, m, len(pts)))
    return results


def _worker(args):
    cfg, state, samples, mode, final_fps, gt_pred = args
    net = CasFusionNet(cfg)
    net.load_state_dict(state)
    return evaluate_samples(net, samples, mode, final_fps, gt_pred)


def evaluate_parallel(cfg: NetworkConfig, state: dict[str, np.ndarray], samples: Sequence[SceneSample],
                      mode: str = "L1", final_fps: bool = True, gt_as_prediction: bool = False,
                      workers: int = 1) -> list[SampleResult]:
    """Fan samples out over ``workers`` processes; results keep input order."""
    if workers <= 1:
        net = CasFusionNet(cfg)
        net.load_state_dict(state)
        return evaluate_samples(net, samples, mode, final_fps, gt_as_prediction)
    chunks = [list(samples[i::workers]) for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_worker, [(cfg, state, ch, mode, final_fps, gt_as_prediction)
                                        for ch in chunks]))
    by_id = {r.sample_id: r for part in parts for r in part}
    return [by_id[s.sample_id] for s in samples]


def aggregate(results: Sequence[SampleResult]) -> Metrics:
    """Summed confusion matrices and mean CD over samples."""
    conf = sum(r.metrics.confusion for r in results)
    miou, macc = miou_macc(conf)
    return Metrics(cd=float(np.mean([r.metrics.cd for r in results])), miou=miou, macc=macc,
                   confusion=conf)


def write_metrics_csv(path, results: Sequence[SampleResult], num_classes: int) -> Metrics:
    total = aggregate(results)
    header = ["sample_id", "cd", "miou", "macc"] + [f"iou_{c}" for c in range(num_classes)]
    lines = [CSV_VERSION, ",".join(header)]

    def row(name, m: Metrics):
        vals = [m.cd, m.miou, m.macc, *m.class_iou]
        return ",".join([name] + ["" if np.isnan(v) else repr(float(v)) for v in vals])

    lines += [row(r.sample_id, r.metrics) for r in results]
    lines.append(row("ALL", total))
    Path(path).write_text("\n".join(lines) + "\n")
    return total


def read_metrics_csv(path) -> dict[str, dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_VERSION:
        raise ValueError(f"{path}: not a metrics CSV")
    header = lines[1].split(",")
    out = {}
    for line in lines[2:]:
        parts = line.split(",")
        out[parts[0]] = {k: float(v) if v else float("nan") for k, v in zip(header[1:], parts[1:])}
    return out
