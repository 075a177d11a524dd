import subprocess
import sys

import numpy as np
import pytest

from semibev import selftest
from semibev.cli import main
from semibev.synthworld import read_manifest, read_ppm


def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_split_and_rerun(tmp_path, capsys):
    assert main(["gen-data", "--n", "20", "--labeled-fraction", "0.1", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert "2 labeled, 18 unlabeled" in capsys.readouterr().out
    main(["gen-data", "--n", "20", "--labeled-fraction", "0.1", "--seed", "7", "--out", str(tmp_path / "b")])
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_gen_data_label_count_for_the_desk_set(tmp_path, monkeypatch):
    # the 512-sample split without rendering 512 images
    import semibev.synthworld as W

    monkeypatch.setattr(W, "save_sample", lambda sample, directory: None)
    monkeypatch.setattr(W, "make_sample", lambda *a, **k: None)
    monkeypatch.setattr(W, "_sample_world_retrying", lambda *a, **k: None)
    assert main(["gen-data", "--n", "512", "--labeled-fraction", "0.1", "--seed", "7", "--out", str(tmp_path)]) == 0
    splits = [s for _, s in read_manifest(tmp_path)]
    assert splits.count("labeled") == 51 and splits.count("unlabeled") == 461


@pytest.mark.parametrize("fraction", ["0", "1.5", "abc"])
def test_gen_data_bad_fraction_is_usage_error(tmp_path, fraction, capsys):
    code = main(["gen-data", "--n", "4", "--labeled-fraction", fraction, "--out", str(tmp_path)])
    assert code == 2 and "usage error" in capsys.readouterr().err


def test_gen_data_io_error(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("x")
    assert main(["gen-data", "--n", "2", "--labeled-fraction", "0.5", "--out", str(blocker)]) == 2


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    cfg = out / "base.cfg"
    cfg.write_text(f"trainer.train_dir = {tiny_data / 'train'}\ntrainer.eval_dir = {tiny_data / 'eval'}\n"
                   f"trainer.out_dir = {out / 'run'}\ntrainer.epochs = 1\ntrainer.eval_every = 1\n")
    assert main(["train", "--config", str(cfg)]) == 0
    return cfg, out / "run"


def test_train_writes_outputs(trained):
    _, run = trained
    assert {p.name for p in run.iterdir()} >= {"metrics.tsv", "teacher_final.ckpt", "student_final.ckpt", "config.cfg"}


def test_train_override_selects_supervised_arm(trained, tmp_path):
    cfg, _ = trained
    out = tmp_path / "sup"
    assert main(["train", "--config", str(cfg), "--trainer.lambda1", "0", "--trainer.lambda2=0",
                 "--trainer.out_dir", str(out)]) == 0
    rows = (out / "metrics.tsv").read_text().splitlines()
    assert rows[1].split("\t")[2:4] == ["0.000000", "0.000000"]
    assert "trainer.lambda1 = 0.0" in (out / "config.cfg").read_text()


def test_train_twice_gives_identical_metrics(trained, tmp_path):
    cfg, run = trained
    assert main(["train", "--config", str(cfg), "--trainer.out_dir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.tsv").read_bytes() == (run / "metrics.tsv").read_bytes()


def test_train_bad_key_and_missing_data(trained, tmp_path, capsys):
    cfg, _ = trained
    assert main(["train", "--config", str(cfg), "--trainer.lamda1", "0"]) == 2
    assert "trainer.lamda1" in capsys.readouterr().err
    assert main(["train", "--trainer.train_dir", str(tmp_path / "none"), "--trainer.out_dir", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["train", "--config", str(cfg), "--trainer.epochs"]) == 2


def test_train_numeric_failure_exit_code(trained, tmp_path, monkeypatch):
    import semibev.trainer as tr

    def explode(*a, **k):
        raise tr.NumericalError("non-finite loss at step 0", str(tmp_path / "dump.txt"))

    monkeypatch.setattr(tr, "train", explode)
    cfg, _ = trained
    assert main(["train", "--config", str(cfg)]) == 3


def test_eval_matches_last_logged_line(trained, tiny_data, tmp_path, capsys):
    _, run = trained
    code = main(["eval", "--checkpoint", str(run / "teacher_final.ckpt"), "--dataset", str(tiny_data / "eval"),
                 "--out", str(tmp_path)])
    assert code == 0
    report = (tmp_path / "report.tsv").read_text().splitlines()
    ious = [line.split("\t")[-1] for line in report[1:]]
    logged = (run / "metrics.tsv").read_text().splitlines()[-1].split("\t")[4:]
    assert ious == logged
    assert "mIoU" in capsys.readouterr().out


def test_eval_errors(trained, tiny_data, tmp_path):
    _, run = trained
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((run / "teacher_final.ckpt").read_bytes()[:100])
    assert main(["eval", "--checkpoint", str(bad), "--dataset", str(tiny_data / "eval")]) == 2
    assert main(["eval", "--checkpoint", str(run / "teacher_final.ckpt"), "--dataset", str(tiny_data / "eval"),
                 "--threshold", "1.0"]) == 2
    assert main(["eval", "--checkpoint", str(run / "teacher_final.ckpt"), "--dataset", str(tmp_path)]) == 2


def test_preview_augment(tiny_data, tmp_path):
    sample = tiny_data / "eval" / "000000"
    assert main(["preview-augment", "--sample", str(sample), "--alpha", "0", "--border", "replicate",
                 "--out", str(tmp_path / "zero")]) == 0
    assert (tmp_path / "zero" / "warped_replicate.ppm").read_bytes() == (sample / "image.ppm").read_bytes()
    assert main(["preview-augment", "--sample", str(sample), "--alpha", "30", "--out", str(tmp_path / "all")]) == 0
    images = {p.name for p in (tmp_path / "all").glob("*.ppm") if not p.name.startswith("gt_")}
    assert images == {"original.ppm", "warped_replicate.ppm", "warped_zero.ppm", "warped_reflect.ppm"}
    assert (tmp_path / "all" / "gt_rotated.ppm").exists()
    orig = read_ppm(sample / "image.ppm")
    rep = read_ppm(tmp_path / "all" / "warped_replicate.ppm")
    assert np.all(rep.min(axis=(1, 2)) >= orig.min(axis=(1, 2)))
    assert np.all(rep.max(axis=(1, 2)) <= orig.max(axis=(1, 2)))
    assert main(["preview-augment", "--sample", str(tmp_path / "nope"), "--alpha", "5", "--out", str(tmp_path)]) == 2


def test_self_test_passes_and_catches_mutation(capsys):
    assert main(["self-test"]) == 0
    out = capsys.readouterr().out
    assert out.count("pass") == 3
    with selftest.flipped_bev_rotation():
        assert main(["self-test"]) == 1
    assert "FAIL  geometry" in capsys.readouterr().out


def test_module_entry_point_and_usage():
    proc = subprocess.run([sys.executable, "-m", "semibev", "self-test"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert main([]) == 2
    assert main(["gen-data", "--n", "2", "--labeled-fraction", "0.5", "--out", "x", "--bogus", "1"]) == 2
