import shutil

import numpy as np
import pytest

from casfusion import data
from casfusion.cli import main
from casfusion.evaluate import aggregate, read_metrics_csv
from casfusion.objective import confusion_matrix, miou_macc

TINY = ["levels=2", "ratios=2,2", "lrm_k=2,0", "d=4", "n_knn=3", "n_group=4", "n0=8",
        "n_input=16", "n_gt=64", "batch_size=2", "out_points=20"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["prepare", "--out", str(root / "data"), "--count", "5", *TINY]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"),
                 "epochs=1", "checkpoint_every=1", *TINY]) == 0
    return root


def test_prepare_outputs(run_dir, capsys):
    files = sorted(p.name for p in (run_dir / "data").iterdir())
    assert len(files) == 11 and "manifest.tsv" in files
    m = data.read_manifest(run_dir / "data" / "manifest.tsv")
    assert len(m.split("train")) == 4 and len(m.split("test")) == 1


def test_prepare_rerun_is_byte_identical(run_dir, tmp_path, capsys):
    assert main(["prepare", "--out", str(tmp_path / "again"), "--count", "5", *TINY]) == 0
    out = capsys.readouterr().out
    assert "train: 4 samples" in out and "floor" in out
    for f in (run_dir / "data").iterdir():
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_train_outputs(run_dir):
    lines = (run_dir / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("#") and lines[1].startswith("epoch,")
    assert len(lines) == 3
    assert (run_dir / "run" / "epoch_0001.cfn").exists()
    assert "n0 = 8" in (run_dir / "run" / "config.txt").read_text()


def test_train_resume_appends(run_dir, tmp_path):
    shutil.copytree(run_dir / "run", tmp_path / "run")
    ckpt = tmp_path / "run" / "last.cfn"
    assert main(["train", "--resume", str(ckpt), "--out", str(tmp_path / "run"), "epochs=2"]) == 0
    assert len((tmp_path / "run" / "metrics.csv").read_text().splitlines()) == 4
    assert main(["train", "--resume", str(ckpt), "d=8"]) == 2


def test_eval_gt_as_prediction(run_dir, tmp_path):
    out = tmp_path / "gt.csv"
    assert main(["eval", "--checkpoint", str(run_dir / "run" / "last.cfn"), "--data",
                 str(run_dir / "data"), "--split", "all", "--out", str(out), "--gt-as-pred"]) == 0
    rows = read_metrics_csv(out)
    assert len(rows) == 6
    assert rows["ALL"]["cd"] == 0.0 and rows["ALL"]["miou"] == 1.0
    assert out.read_text().startswith("# casfusion-metrics v1")


def test_eval_aggregate_matches_confusion_sum(run_dir, tmp_path):
    ckpt = str(run_dir / "run" / "last.cfn")
    args = ["eval", "--checkpoint", ckpt, "--data", str(run_dir / "data"), "--split", "all"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b" / "eval.csv").read_text()

    from casfusion.evaluate import evaluate_samples
    from casfusion.train import load_network
    run, net = load_network(ckpt)
    m = data.read_manifest(run_dir / "data" / "manifest.tsv")
    samples = [data.load_entry(e, m.num_classes) for e in m.entries]
    results = evaluate_samples(net, samples, run.cd_mode)
    conf = sum(r.metrics.confusion for r in results)
    assert aggregate(results).miou == pytest.approx(miou_macc(conf)[0], abs=0)
    assert read_metrics_csv(tmp_path / "a.csv")["ALL"]["miou"] == pytest.approx(
        miou_macc(conf)[0], abs=1e-9)


def test_eval_mismatch_exit_code(run_dir, tmp_path, capsys):
    assert main(["prepare", "--out", str(tmp_path / "other"), "--count", "2", *TINY,
                 "num_classes=6"]) == 0
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(run_dir / "run" / "last.cfn"), "--data",
                 str(tmp_path / "other"), "--out", str(tmp_path / "x.csv")])
    assert code == 5
    assert "num_classes" in capsys.readouterr().err


def test_complete_outputs(run_dir, tmp_path):
    ckpt = str(run_dir / "run" / "last.cfn")
    partial = str(run_dir / "data" / "scene_00000_partial.bin")
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    for out in (a, b):
        assert main(["complete", "--checkpoint", ckpt, "--input", partial, "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert data.check_ply(a) == 20


def test_complete_no_final_fps_keeps_alignment(run_dir, tmp_path):
    ckpt = str(run_dir / "run" / "last.cfn")
    partial = str(run_dir / "data" / "scene_00001_partial.bin")
    fps, raw = tmp_path / "fps.bin", tmp_path / "raw.bin"
    assert main(["complete", "--checkpoint", ckpt, "--input", partial, "--out", str(fps),
                 "--format", "binary"]) == 0
    assert main(["complete", "--checkpoint", ckpt, "--input", partial, "--out", str(raw),
                 "--format", "binary", "--no-final-fps"]) == 0
    p1, l1, _ = data.load_sample(fps)
    p2, l2, _ = data.load_sample(raw)
    # level sizes for n0=8: 2*8+2 = 18, then 36
    assert len(p1) == 20 and len(p2) == 36
    pairs = {tuple(p) + (l,) for p, l in zip(p2.tolist(), l2.tolist())}
    assert all(tuple(p) + (l,) in pairs for p, l in zip(p1.tolist(), l1.tolist()))


@pytest.mark.parametrize("argv,code", [
    (["prepare", "bogus=1"], 2),
    (["prepare", "--out", "/dev/null/x", "--count", "1"], 3),
    (["train", "--data", "/nonexistent", "--out", "/tmp/x", *TINY], 3),
    (["eval", "--checkpoint", "/nonexistent.cfn", "--data", ".", "--out", "x.csv"], 3),
    (["frobnicate"], 2),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code
    assert capsys.readouterr().err


def test_complete_malformed_input(run_dir, tmp_path, capsys):
    ckpt = str(run_dir / "run" / "last.cfn")
    bad = tmp_path / "bad.txt"
    bad.write_text("not a point file\n")
    assert main(["complete", "--checkpoint", ckpt, "--input", str(bad), "--out",
                 str(tmp_path / "o.ply")]) == 6
    short = tmp_path / "short.txt"
    data.save_sample(short, np.zeros((4, 3)))
    assert main(["complete", "--checkpoint", ckpt, "--input", str(short), "--out",
                 str(tmp_path / "o.ply")]) == 6
    assert "n0=8" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(run_dir, tmp_path):
    code = main(["train", "--data", str(run_dir / "data"), "--out", str(tmp_path / "d"),
                 "epochs=1", "lr=1e300", *TINY])
    assert code == 4
    assert (tmp_path / "d" / "diverged.cfn").exists()


def test_confusion_helper_consistency():
    conf = confusion_matrix([0, 1, 1], [0, 1, 0], 2)
    # IoU 1/2 for both classes, recall 1 and 1/2
    assert miou_macc(conf) == pytest.approx((0.5, 0.75))
