import json

import numpy as np
import pytest
from PIL import Image

from adaconv.cli import recursive_names, run_cli
from adaconv.frames import load_frame, save_frame
from adaconv.net import NetworkConfig, init_network, save_checkpoint
from adaconv.tensor import Conv2D


def delta_net(row, col):
    """Desk net whose every kernel is a point mass at (row, col) of the k x 2k grid."""
    net = init_network(NetworkConfig.desk(), 0)
    last = [l for l in net.layers if isinstance(l, Conv2D)][-1]
    last.params["weight"][:] = 0
    last.params["bias"][:] = -50
    last.params["bias"][row * 22 + col] = 50
    return net


@pytest.fixture
def frames(tmp_path):
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 12, 14)), rng.random((3, 12, 14))
    save_frame(tmp_path / "a.png", a)
    save_frame(tmp_path / "b.png", b)
    return tmp_path / "a.png", tmp_path / "b.png"


def test_missing_subcommand_and_unknown_flag(capsys):
    assert run_cli([]) == 1
    assert "usage: adaconv" in capsys.readouterr().err
    assert run_cli(["evaluate", "--pred", "x", "--truth", "y", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    assert run_cli(["evaluate", "--pred", str(tmp_path / "no.png"), "--truth", str(tmp_path / "no.png")]) == 2
    (tmp_path / "bad.adkn").write_bytes(b"nope")
    assert run_cli(["interpolate", "--model", str(tmp_path / "bad.adkn"), "--frame1", "a",
                    "--frame2", "b", "--out", str(tmp_path / "c.png")]) == 2


def test_interpolate_with_delta_kernel(tmp_path, frames):
    save_checkpoint(delta_net(5, 5), tmp_path / "m.adkn")
    out = tmp_path / "c.png"
    assert run_cli(["interpolate", "--model", str(tmp_path / "m.adkn"), "--frame1", str(frames[0]),
                    "--frame2", str(frames[1]), "--out", str(out)]) == 0
    # centre of the frame-1 half copies frame 1
    assert np.array_equal(np.asarray(Image.open(out)), np.asarray(Image.open(frames[0])))


def test_recursive_names_and_outputs(tmp_path, frames):
    assert [p.name for p in recursive_names(tmp_path / "c.png", 2)] == ["c_t25.png", "c_t50.png", "c_t75.png"]
    assert len(recursive_names("c.png", 3)) == 7
    save_checkpoint(init_network(NetworkConfig.desk(), 1), tmp_path / "m.adkn")
    assert run_cli(["interpolate", "--model", str(tmp_path / "m.adkn"), "--frame1", str(frames[0]),
                    "--frame2", str(frames[1]), "--out", str(tmp_path / "c.png"), "--recursive", "2"]) == 0
    for name in ["c_t25.png", "c_t50.png", "c_t75.png"]:
        assert load_frame(tmp_path / name).shape == (3, 12, 14)
    assert run_cli(["interpolate", "--model", str(tmp_path / "m.adkn"), "--frame1", str(frames[0]),
                    "--frame2", str(frames[1]), "--out", str(tmp_path / "c.png"), "--recursive", "0"]) == 1


def test_evaluate_output(tmp_path, frames, capsys):
    assert run_cli(["evaluate", "--pred", str(frames[0]), "--truth", str(frames[0])]) == 0
    assert capsys.readouterr().out.strip() == "ie 0.000000 psnr 99.000000"
    save_frame(tmp_path / "p.png", np.full((3, 5, 5), 30 / 255))
    save_frame(tmp_path / "t.png", np.full((3, 5, 5), 20 / 255))
    assert run_cli(["evaluate", "--pred", str(tmp_path / "p.png"), "--truth", str(tmp_path / "t.png")]) == 0
    ie, psnr = capsys.readouterr().out.split()[1::2]
    assert float(ie) == pytest.approx(10.0)


def test_inspect_delta_kernel(tmp_path, frames):
    save_checkpoint(delta_net(3, 11 + 7), tmp_path / "m.adkn")
    out = tmp_path / "dump"
    assert run_cli(["inspect", "--model", str(tmp_path / "m.adkn"), "--frame1", str(frames[0]),
                    "--frame2", str(frames[1]), "--pixels", "2,3;13,11", "--out", str(out)]) == 0
    k2 = np.asarray(Image.open(out / "pixel_2_3_k2.png"))
    assert k2.shape == (11, 11)
    assert k2[3, 7] == 255 and np.count_nonzero(k2) == 1
    assert not np.asarray(Image.open(out / "pixel_2_3_k1.png")).any()
    info = json.loads((out / "pixel_13_11.json").read_text())
    assert info["mass1"] + info["mass2"] == pytest.approx(1, abs=1e-6)
    assert info["centroid1"] is None
    assert info["centroid2"] == pytest.approx([2.0, -2.0], abs=1e-4)
    assert (out / "pixel_13_11_crop.png").exists()
    assert run_cli(["inspect", "--model", str(tmp_path / "m.adkn"), "--frame1", str(frames[0]),
                    "--frame2", str(frames[1]), "--pixels", "14,0", "--out", str(out)]) == 1


def test_uniform_kernel_centroid(tmp_path, frames):
    net = init_network(NetworkConfig.desk(), 0)
    last = [l for l in net.layers if isinstance(l, Conv2D)][-1]
    last.params["weight"][:] = 0
    save_checkpoint(net, tmp_path / "m.adkn")
    assert run_cli(["inspect", "--model", str(tmp_path / "m.adkn"), "--frame1", str(frames[0]),
                    "--frame2", str(frames[1]), "--pixels", "4,4", "--out", str(tmp_path / "d")]) == 0
    info = json.loads((tmp_path / "d/pixel_4_4.json").read_text())
    assert info["centroid1"] == pytest.approx([0, 0], abs=1e-6)
    assert info["mass1"] == pytest.approx(0.5, abs=1e-6)


def test_synth_extract_train_pipeline(tmp_path, capsys):
    assert run_cli(["synth-data", "--out", str(tmp_path / "clips"), "--clips", "3", "--seed", "1",
                    "--size", "40"]) == 0
    assert len(list((tmp_path / "clips/clip_000").glob("*.png"))) == 5
    assert run_cli(["extract", "--frames", str(tmp_path / "clips"), "--out", str(tmp_path / "ds"),
                    "--n-weighted", "6", "--n-final", "4", "--seed", "2", "--candidates", "2"]) == 0
    assert run_cli(["train", "--data", str(tmp_path / "ds"), "--out", str(tmp_path / "m.adkn"),
                    "--steps", "3", "--batch", "2", "--threads", "1", "--validation-fraction", "0.25"]) == 0
    out = capsys.readouterr().out
    assert "step 3 loss" in out and "validation color" in out
    assert (tmp_path / "m.adkn").read_bytes()[:4] == b"ADKN"
    assert run_cli(["extract", "--frames", str(tmp_path / "clips"), "--out", str(tmp_path / "ds2"),
                    "--n-weighted", "600", "--n-final", "4"]) == 2
