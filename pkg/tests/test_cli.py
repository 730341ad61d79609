import json

import numpy as np
import pytest

from planepose.cli import main
from planepose.volume import read_slice, read_volume

TINY = """
epochs = 1
lr = 0.001
batch_size = 4
volume_dims = 32, 32, 32
resolution = 16
metric_resolution = 16
val_size = 4
n_per_volume = 2
model.channels = 4, 6
model.hidden = 32
model.embedding_dim = 8
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def test_generate_volume(tmp_path, capsys):
    out = tmp_path / "v.ppv"
    assert main(["generate-volume", "--seed", "3", "--dims", "16", "20", "24", "--out", str(out)]) == 0
    vol = read_volume(out)
    assert vol.data.shape == (16, 20, 24)


def test_sample_slices_writes_images_and_sidecars(tmp_path, cfg_file):
    out = tmp_path / "slices"
    assert main(["sample-slices", "--config", cfg_file, "--seed", "1", "--n", "3", "--out-dir", str(out)]) == 0
    files = sorted(out.glob("*.pgm"))
    assert len(files) == 3
    s = read_slice(files[0])
    assert s.data.shape == (16, 16)
    assert s.pose.as_vector().shape == (9,)


def test_train_evaluate_predict_round_trip(tmp_path, cfg_file, capsys):
    ck = tmp_path / "ck"
    assert main(["train", "--config", cfg_file, "--seed", "0", "--method", "mve", "--out", str(ck)]) == 0
    assert (ck / "model.json").exists() and (ck / "training.png").stat().st_size > 0

    capsys.readouterr()
    ev = tmp_path / "eval"
    assert main(["evaluate", "--config", cfg_file, "--seed", "0", "--checkpoint", str(ck), "--gallery", "2", "--out", str(ev)]) == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].startswith("method,ED,")
    for name in ("metrics.csv", "per_slice.csv", "metrics.png", "slices.png"):
        assert (ev / name).stat().st_size > 0

    sl = tmp_path / "slices"
    main(["sample-slices", "--config", cfg_file, "--seed", "2", "--n", "2", "--out", str(sl)])
    pred = tmp_path / "pred.json"
    files = [str(p) for p in sorted(sl.glob("*.pgm"))]
    assert main(["predict", "--checkpoint", str(ck), "--slices", *files, "--out", str(pred)]) == 0
    records = json.loads(pred.read_text())
    assert len(records) == 2 and len(records[0]["fused_var"]) == 9


def test_ground_truth_evaluation_is_perfect(tmp_path, cfg_file):
    ev = tmp_path / "gt"
    assert main(["evaluate", "--config", cfg_file, "--ground-truth", "--out", str(ev)]) == 0
    row = (ev / "metrics.csv").read_text(encoding="utf-8").splitlines()[1].split(",")
    assert row[0] == "ground_truth"
    assert row[1].startswith("0.000000±") and row[6].startswith("1.000000±")


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = -3\n")
    assert main(["generate-volume", "--config", str(bad), "--out", str(tmp_path / "v")]) == 2
    assert "config error" in capsys.readouterr().err


def test_input_error_exit_code(tmp_path, capsys):
    assert main(["predict", "--checkpoint", str(tmp_path / "missing")]) == 1
    assert "error" in capsys.readouterr().err


def test_numeric_error_exit_code(tmp_path, cfg_file, monkeypatch, capsys):
    from planepose import harness

    real = harness.method_loss

    def exploding(*args, **kw):
        return real(*args, **kw) * np.float64(np.nan)

    monkeypatch.setattr(harness, "method_loss", exploding)
    code = main(["train", "--config", cfg_file, "--method", "mve", "--out", str(tmp_path / "ck")])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err
