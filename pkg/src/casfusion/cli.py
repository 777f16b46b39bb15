"""``casfusion`` command line.

Exit codes:
    0  success
    2  configuration error (bad key, bad value, bad flag)
    3  I/O error (unreadable or unwritable path, bad checkpoint)
    4  training diverged (non-finite loss)
    5  checkpoint and dataset constants disagree
    6  malformed input point file
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_pairs, parse_text
from .evaluate import evaluate_parallel, predict, write_metrics_csv
from .train import DivergenceError, Trainer, write_metrics_csv as write_train_csv

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5
EXIT_MALFORMED = 6

log = logging.getLogger("casfusion")

# keys that may change when resuming without invalidating the stored state
RESUME_KEYS = {"epochs", "checkpoint_every", "data", "out"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _overrides(items: list[str]) -> dict[str, str]:
    pairs = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    return pairs


def _manifest(path) -> data.Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    try:
        return data.read_manifest(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read manifest {path}: {exc}") from None
    except data.SampleFormatError as exc:
        raise CliError(EXIT_MALFORMED, str(exc)) from None


def _load_split(manifest: data.Manifest, split: str) -> list[data.SceneSample]:
    entries = manifest.split(split) if split != "all" else manifest.entries
    if not entries:
        raise CliError(EXIT_IO, f"manifest has no {split!r} samples")
    try:
        return [data.load_entry(e, manifest.num_classes) for e in entries]
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except data.SampleFormatError as exc:
        raise CliError(EXIT_MALFORMED, str(exc)) from None


def _check_compatible(run: RunConfig, manifest: data.Manifest) -> None:
    conflicts = []
    if run.n_input != manifest.n_partial:
        conflicts.append(f"n_input={run.n_input} vs data n={manifest.n_partial}")
    if run.num_classes != manifest.num_classes:
        conflicts.append(f"num_classes={run.num_classes} vs data c={manifest.num_classes}")
    if run.n_gt != manifest.n_gt:
        conflicts.append(f"n_gt={run.n_gt} vs data m_gt={manifest.n_gt}")
    if conflicts:
        raise CliError(EXIT_MISMATCH, "checkpoint/data mismatch: " + "; ".join(conflicts))


def _read_checkpoint(path):
    try:
        text, params, state = load_checkpoint(path)
        run = parse_text(text).validate()
    except CheckpointError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    return run, params, state


def _mkdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {path}: {exc}") from None
    return path


# -- commands -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    overrides = _overrides(args.overrides)
    for key in ("out", "count", "seed"):
        if getattr(args, key) is not None:
            overrides[key] = str(getattr(args, key))
    run = load_config(args.config, overrides)
    if not run.out:
        raise ConfigError("out: no output directory given")
    out = _mkdir(run.out)
    try:
        manifest = data.build_dataset(out, run.count, run.scene_spec(),
                                      (run.train_ratio, 1.0 - run.train_ratio), run.seed,
                                      run.n_input, run.sample_format, run.partial_method,
                                      run.radius_factor)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from None
    except data.GenerationError as exc:
        raise ConfigError(str(exc)) from None
    names = data.CLASS_NAMES[:run.num_classes]
    print(f"wrote {len(manifest.entries)} samples to {out}")
    for split in ("train", "test"):
        entries = manifest.split(split)
        hist = np.zeros(run.num_classes, dtype=np.int64)
        for e in entries:
            _, labels, _ = data.load_sample(e.gt_path)
            hist += np.bincount(labels, minlength=run.num_classes)
        print(f"{split}: {len(entries)} samples")
        for name, count in zip(names, hist):
            print(f"  {name:<8} {count}")
    return 0


def cmd_train(args) -> int:
    overrides = _overrides(args.overrides)
    if args.data:
        overrides["data"] = args.data
    if args.out:
        overrides["out"] = args.out
    if args.model:
        overrides["model"] = args.model

    if args.resume:
        stored, _, state = _read_checkpoint(args.resume)
        if state is None:
            raise CliError(EXIT_IO, f"{args.resume}: checkpoint has no training state")
        bad = set(overrides) - RESUME_KEYS
        if bad:
            raise ConfigError(f"cannot change {sorted(bad)} when resuming")
        run = parse_pairs(overrides, stored).validate()
    else:
        run = load_config(args.config, overrides)
        state = None
    if not run.data or not run.out:
        raise ConfigError("both data and out must be set")

    manifest = _manifest(run.data)
    _check_compatible(run, manifest)
    samples = _load_split(manifest, "train")
    out = _mkdir(run.out)
    try:
        (out / "config.txt").write_text(run.to_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from None

    trainer = Trainer(run, samples)
    if state is not None:
        trainer.restore(state)
    metrics = out / "metrics.csv"
    append = state is not None and metrics.exists()
    write_train_csv(metrics, run.levels, [], append=append)

    def on_epoch(entry):
        write_train_csv(metrics, run.levels, [entry], append=True)
        done = entry.epoch + 1
        if run.checkpoint_every > 0 and done % run.checkpoint_every == 0:
            trainer.save(out / f"epoch_{done:04d}.cfn")

    try:
        history = trainer.fit(run.epochs, on_epoch)
    except DivergenceError as exc:
        log.error("%s", exc)
        trainer.save(out / "diverged.cfn")
        return EXIT_DIVERGED
    trainer.save(out / "last.cfn")
    if history:
        last = history[-1]
        print(f"epoch {last.epoch + 1}/{run.epochs} cd " + " ".join(f"{c:.6f}" for c in last.cd)
              + f" sem {last.sem[-1]:.6f}")
    else:
        print(f"nothing to do: already at epoch {trainer.epoch}")
    print(f"checkpoint {out / 'last.cfn'}")
    return 0


def cmd_eval(args) -> int:
    run, params, _ = _read_checkpoint(args.checkpoint)
    manifest = _manifest(args.data)
    _check_compatible(run, manifest)
    samples = _load_split(manifest, args.split)
    cfg = run.network()
    results = evaluate_parallel(cfg, params, samples, run.cd_mode, final_fps=not args.no_final_fps,
                                gt_as_prediction=args.gt_as_pred, workers=args.workers)
    out = Path(args.out)
    if out.suffix != ".csv":
        out = _mkdir(out) / "eval.csv"
    try:
        total = write_metrics_csv(out, results, cfg.num_classes)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    print(f"samples {len(results)} cd {total.cd:.6f} miou {total.miou:.4f} macc {total.macc:.4f}")
    print(f"metrics {out}")
    return 0


def cmd_complete(args) -> int:
    run, params, _ = _read_checkpoint(args.checkpoint)
    try:
        points, _, _ = data.load_sample(args.input)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.input}: {exc}") from None
    except data.SampleFormatError as exc:
        raise CliError(EXIT_MALFORMED, str(exc)) from None
    cfg = run.network()
    if len(points) < cfg.n0:
        raise CliError(EXIT_MALFORMED, f"{args.input}: {len(points)} points, need at least n0={cfg.n0}")
    from .cascade import CasFusionNet

    net = CasFusionNet(cfg)
    net.load_state_dict(params)
    pts, scores = predict(net, points, final_fps=not args.no_final_fps)
    labels = scores.argmax(axis=1)
    try:
        if args.format == "ply":
            data.write_ply(args.out, pts, labels)
        else:
            data.save_sample(args.out, pts, labels, cfg.num_classes, args.format)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(pts)} points to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="casfusion", description="Cascaded semantic scene completion.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prepare", help="generate a synthetic dataset")
    pr.add_argument("--config")
    pr.add_argument("--out")
    pr.add_argument("--count", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("overrides", nargs="*", metavar="key=value")
    pr.set_defaults(func=cmd_prepare)

    tr = sub.add_parser("train", help="train a network")
    tr.add_argument("--config")
    tr.add_argument("--data")
    tr.add_argument("--out")
    tr.add_argument("--resume", metavar="CHECKPOINT")
    tr.add_argument("--model", choices=["full", "A", "B", "C", "D"])
    tr.add_argument("overrides", nargs="*", metavar="key=value")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=["train", "test", "all"])
    ev.add_argument("--out", required=True)
    ev.add_argument("--no-final-fps", action="store_true")
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--gt-as-pred", action="store_true", help="score ground truth against itself")
    ev.set_defaults(func=cmd_eval)

    co = sub.add_parser("complete", help="complete one partial cloud")
    co.add_argument("--checkpoint", required=True)
    co.add_argument("--input", required=True)
    co.add_argument("--out", required=True)
    co.add_argument("--format", default="ply", choices=["ply", "ascii", "binary"])
    co.add_argument("--no-final-fps", action="store_true")
    co.set_defaults(func=cmd_complete)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
