import csv

import numpy as np
import pytest

from fastflownet import cli, io, tensor
from fastflownet.net import NetConfig, init_weights


@pytest.fixture
def images(tmp_path, rng):
    a = rng.random((1, 3, 70, 90))
    io.write_image(tmp_path / "a.ppm", a)
    io.write_image(tmp_path / "b.png", np.roll(a, 1, axis=3))
    return tmp_path / "a.ppm", tmp_path / "b.png"


@pytest.fixture
def weights_file(tmp_path):
    p = tmp_path / "w.ffnw"
    assert cli.main(["init-weights", "--seed", "2", "--out", str(p)]) == 0
    return p


def test_infer(tmp_path, images, weights_file, capsys):
    out = tmp_path / "o.flo"
    code = cli.main(["infer", str(images[0]), str(images[1]), "--weights", str(weights_file),
                     "--out", str(out), "--color", str(tmp_path / "c.png"), "--stop-level", "4"])
    assert code == 0
    assert io.read_flo(out).shape == (1, 2, 70, 90)
    assert io.read_image(tmp_path / "c.png").shape == (1, 3, 70, 90)
    text = capsys.readouterr().out
    for stage in ("load", "resize", "network", "write"):
        assert stage in text


def test_infer_wrong_config(tmp_path, images, weights_file, capsys):
    code = cli.main(["infer", str(images[0]), str(images[1]), "--weights", str(weights_file),
                     "--groups", "2", "--out", str(tmp_path / "o.flo")])
    assert code == 1
    assert "fconv" in capsys.readouterr().err


def test_infer_missing_file(tmp_path, weights_file, capsys):
    code = cli.main(["infer", "nope.ppm", "nope2.ppm", "--weights", str(weights_file), "--out", str(tmp_path / "o.flo")])
    assert code == 1
    assert "nope.ppm" in capsys.readouterr().err


def test_infer_size_mismatch(tmp_path, images, weights_file):
    io.write_image(tmp_path / "small.ppm", np.zeros((1, 3, 10, 10)))
    code = cli.main(["infer", str(images[0]), str(tmp_path / "small.ppm"), "--weights", str(weights_file),
                     "--out", str(tmp_path / "o.flo")])
    assert code == 1


def test_bad_stop_level():
    with pytest.raises(SystemExit):
        cli.main(["infer", "a", "b", "--weights", "w", "--out", "o", "--stop-level", "7"])


def test_analyze_text(capsys):
    assert cli.main(["analyze"]) == 0
    assert "params: 1.37M" in capsys.readouterr().out


def test_analyze_csv(tmp_path):
    out = tmp_path / "a.csv"
    assert cli.main(["analyze", "--format", "csv", "--cost-mode", "r3", "--groups", "2",
                     "--resolution", "128x256", "--out", str(out)]) == 0
    raw = out.read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows[0] == ["layer", "module", "level", "params", "flops"]
    assert any(r[0] == "square_r32" for r in rows)


def test_analyze_sweep(capsys):
    assert cli.main(["analyze", "--sweep-groups"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6


def test_analyze_bad_resolution():
    with pytest.raises(SystemExit):
        cli.main(["analyze", "--resolution", "100"])


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 12 and "FAIL" not in out


def test_gradcheck_catches_broken_kernel(monkeypatch, capsys):
    real = tensor.avgpool2_backward
    monkeypatch.setattr(tensor, "avgpool2_backward", lambda g: real(g) * 0.9)
    assert cli.main(["gradcheck"]) == 1
    assert "avgpool2" in capsys.readouterr().err


def test_train_toy_short(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train-toy", "--steps", "3", "--pairs", "2", "--out", str(out)]) == 0
    raw = (out / "loss.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 5
    assert [int(l.split(",")[0]) for l in lines[1:]] == [0, 1, 2, 3]
    io.load_weights(out / "weights.ffnw", NetConfig(levels=(4, 3, 2)))
    assert "ratio" in capsys.readouterr().out


def test_viz(tmp_path, rng):
    io.write_flo(tmp_path / "f.flo", rng.normal(size=(1, 2, 6, 8)).astype(np.float32))
    assert cli.main(["viz", str(tmp_path / "f.flo"), "--out", str(tmp_path / "v.ppm"), "--max-magnitude", "3"]) == 0
    assert io.read_image(tmp_path / "v.ppm").shape == (1, 3, 6, 8)


def test_viz_corrupt(tmp_path, capsys):
    (tmp_path / "bad.flo").write_bytes(b"abcd")
    assert cli.main(["viz", str(tmp_path / "bad.flo"), "--out", str(tmp_path / "v.png")]) == 1
    assert "bytes" in capsys.readouterr().err


def test_train_toy_zero_steps(tmp_path):
    out = tmp_path / "z"
    assert cli.main(["train-toy", "--steps", "0", "--seed", "4", "--out", str(out)]) == 0
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 2 and lines[1].startswith("0,")
    from fastflownet.train import TOY_CONFIG, TOY_INIT_GAIN

    assert io.load_weights(out / "weights.ffnw").equals(init_weights(TOY_CONFIG, 4, gain=TOY_INIT_GAIN))


def test_viz_zero_flow_is_white(tmp_path):
    io.write_flo(tmp_path / "z.flo", np.zeros((1, 2, 3, 4), np.float32))
    assert cli.main(["viz", str(tmp_path / "z.flo"), "--out", str(tmp_path / "z.ppm")]) == 0
    np.testing.assert_array_equal(io.read_image(tmp_path / "z.ppm"), 1.0)
