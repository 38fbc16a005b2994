import numpy as np
import pytest

from sdtc import checkpoint
from sdtc.cli import EXIT_CONFIG, EXIT_GRAD, EXIT_NUMERIC, EXIT_OK, main
from sdtc.data import read_dataset
from sdtc.losses import pck_accuracy
from sdtc.render import read_pnm

TINY = """\
model.channels = 8
model.heads = 2
model.expansion = 1
data.num_samples = 4
train.batch_size = 2
train.epochs = 2
train.milestones = 1
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Dataset plus a trained two-epoch run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.txt").write_text(TINY)
    assert main(["gen-data", "--config", str(root / "tiny.txt"), "--out", str(root / "d.sdtd")]) == 0
    assert main(["train", "--config", str(root / "tiny.txt"), "--data", str(root / "d.sdtd"),
                 "--out", str(root / "run")]) == 0
    return root


def test_gen_data_prints_digest(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a.sdtd"), "--n", "2"]) == EXIT_OK
    line = capsys.readouterr().out.strip()
    assert line.startswith("samples=2 sha256=") and len(line.split("sha256=")[1]) == 64
    assert main(["gen-data", "--out", str(tmp_path / "b.sdtd"), "--n", "2"]) == EXIT_OK
    assert (tmp_path / "a.sdtd").read_bytes() == (tmp_path / "b.sdtd").read_bytes()


def test_gen_data_empty_and_unwritable(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "e.sdtd"), "--n", "0"]) == EXIT_OK
    assert read_dataset(tmp_path / "e.sdtd") == []
    assert main(["gen-data", "--out", str(tmp_path / "missing" / "x.sdtd"), "--n", "1"]) == EXIT_CONFIG


def test_bad_overrides_exit_config(tmp_path):
    out = str(tmp_path / "x.sdtd")
    assert main(["gen-data", "--out", out, "--set", "model.nope=1"]) == EXIT_CONFIG
    assert main(["gen-data", "--out", out, "--set", "model.channels=abc"]) == EXIT_CONFIG
    assert main(["gen-data", "--out", out, "--set", "novalue"]) == EXIT_CONFIG
    assert main(["gen-data", "--out", out, "--config", str(tmp_path / "absent.txt")]) == EXIT_CONFIG


def test_train_writes_run_directory(run):
    files = sorted(p.name for p in (run / "run").iterdir())
    assert files == ["config.txt", "epoch_001.opt.sdtc", "epoch_001.sdtc", "final.opt.sdtc",
                     "final.sdtc", "metrics.log"]
    lines = (run / "run" / "metrics.log").read_text().splitlines()
    assert [ln.split()[0] for ln in lines] == ["epoch=1", "epoch=2"]
    assert "model.channels = 8" in (run / "run" / "config.txt").read_text()


def test_resume_reproduces_final_checkpoint(run, tmp_path):
    cfg = str(run / "tiny.txt")
    assert main(["train", "--config", cfg, "--data", str(run / "d.sdtd"), "--out", str(tmp_path),
                 "--resume", str(run / "run" / "epoch_001.sdtc")]) == EXIT_OK
    assert (tmp_path / "final.sdtc").read_bytes() == (run / "run" / "final.sdtc").read_bytes()
    assert len((tmp_path / "metrics.log").read_text().splitlines()) == 1


def test_seed_from_environment(run, tmp_path, monkeypatch):
    monkeypatch.setenv("SDTC_SEED", "5")
    assert main(["train", "--config", str(run / "tiny.txt"), "--data", str(run / "d.sdtd"),
                 "--out", str(tmp_path)]) == EXIT_OK
    assert "train.seed = 5" in (tmp_path / "config.txt").read_text()
    assert (tmp_path / "final.sdtc").read_bytes() != (run / "run" / "final.sdtc").read_bytes()


def test_train_rejects_bad_dataset(run, tmp_path):
    bad = tmp_path / "bad.sdtd"
    bad.write_bytes((run / "d.sdtd").read_bytes()[:100])
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert main(["train", "--data", str(tmp_path / "none.sdtd"), "--out", str(tmp_path / "r")]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_numeric(run, tmp_path):
    code = main(["train", "--config", str(run / "tiny.txt"), "--set", "train.base_lr=1e36",
                 "--data", str(run / "d.sdtd"), "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC


def test_eval_and_infer_agree(run, tmp_path, capsys):
    ckpt = str(run / "run" / "final.sdtc")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(run / "d.sdtd")]) == EXIT_OK
    report = capsys.readouterr().out
    lines = report.splitlines()
    assert len(lines) == 16 and lines[0].startswith("head_bottom ")
    assert main(["infer", "--checkpoint", ckpt, "--data", str(run / "d.sdtd"),
                 "--out", str(tmp_path)]) == EXIT_OK
    samples = read_dataset(run / "d.sdtd")
    outs = [checkpoint.load(tmp_path / f"sample_{i:04d}.sdtc") for i in range(len(samples))]
    assert outs[0]["heatmaps"].shape == (15, 16, 12) and outs[0]["joints"].shape == (15, 2)
    pred = np.stack([o["joints"] for o in outs])
    gt = np.stack([s.joints[s.keyframe] for s in samples])
    vis = np.stack([s.visible[s.keyframe] for s in samples])
    assert pck_accuracy(pred, gt, vis, 0.2, (64, 48)).format() == report


def test_eval_missing_checkpoint(run, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "no.sdtc"),
                 "--data", str(run / "d.sdtd")]) == EXIT_CONFIG


def test_render_images(run, tmp_path):
    pred = tmp_path / "pred"
    assert main(["infer", "--checkpoint", str(run / "run" / "final.sdtc"), "--data", str(run / "d.sdtd"),
                 "--out", str(pred)]) == EXIT_OK
    out = tmp_path / "img"
    assert main(["render", "--data", str(run / "d.sdtd"), "--pred", str(pred), "--heatmaps", str(pred),
                 "--out", str(out)]) == EXIT_OK
    magic, rgb = read_pnm(out / "sample_0000.ppm")
    assert magic == "P6" and rgb.shape == (64, 48, 3)
    assert (out / "sample_0000.ppm").read_bytes().startswith(b"P6\n48 64\n255\n")
    magic, gray = read_pnm(out / "sample_0003_14_right_ankle.pgm")
    assert magic == "P5" and gray.shape == (16, 12)
    assert len(list(out.glob("*.pgm"))) == 4 * 15
    assert main(["render", "--out", str(out)]) == EXIT_CONFIG


def test_grad_check_pass_and_corrupted(capsys):
    small = ["--set", "model.channels=8", "--set", "model.heads=2", "--set", "model.expansion=1",
             "--coords", "2"]
    assert main(["grad-check", *small]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS")
    assert main(["grad-check", *small, "--corrupt-adjoint", "matmul"]) == EXIT_GRAD
    assert capsys.readouterr().out.startswith("FAIL")


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "sdtc", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "eval", "infer", "grad-check", "render"):
        assert cmd in res.stdout
