import json

import numpy as np
import pytest
from PIL import Image

from nltvsar.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, to_gray
from nltvsar.core import read_image, write_image


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    code = main(["simulate", "--out", str(root), "--dims", "32x32", "--count", "4",
                 "--split", "0.5", "--seed", "7", "--az-drop", "0.1", "--rg-drop", "0.1"])
    assert code == EXIT_OK
    return root


def test_simulate_layout(dataset):
    for kind in ("scenes", "labels", "echoes", "masks"):
        assert len(list((dataset / kind).glob("*.sphc"))) == 4
    doc = json.loads((dataset / "run_manifest.json").read_text())
    assert doc["command"] == "simulate" and doc["seeds"]["seed"] == 7
    assert doc["counts"] == {"train": 2, "test": 2}
    assert (dataset / "split.txt").read_text().split() == ["train", "0000", "train", "0001",
                                                            "test", "0002", "test", "0003"]


@pytest.mark.parametrize("method", ["csa", "l1-admm", "nltv-nc-admm"])
def test_reconstruct_and_eval(dataset, tmp_path, method):
    out = tmp_path / method
    assert main(["reconstruct", "--method", method, "--dataset", str(dataset),
                 "--out", str(out), "--iters", "3"]) == EXIT_OK
    for i in ("0002", "0003"):
        assert read_image(out / f"{i}.sphc").shape == (32, 32)
        with Image.open(out / f"{i}.pgm") as im:
            assert im.size == (32, 32) and im.mode == "L"
        assert (out / f"{i}_residuals.csv").exists() == (method != "csa")
    doc = json.loads((out / "run_manifest.json").read_text())
    assert set(doc["solve_seconds"]) == {"0002", "0003"}

    metrics = tmp_path / f"{method}.csv"
    assert main(["eval", "--recon", str(out), "--labels", str(dataset / "labels"),
                 "--out", str(metrics)]) == EXIT_OK
    lines = metrics.read_text().splitlines()
    assert lines[0].startswith("scene_id,method,ENL,gamma_dB,ESI,PSNR_dB,SSIM")
    assert lines[-1].startswith(f"mean,{method},")
    assert len(lines) == 4


def test_train_then_network_reconstruct(dataset, tmp_path):
    run = tmp_path / "train"
    assert main(["train", "--dataset", str(dataset), "--out", str(run), "--epochs", "1",
                 "--layers", "2", "--batch-size", "2"]) == EXIT_OK
    assert (run / "checkpoint.sphp").exists()
    assert (run / "loss.csv").read_text().splitlines()[0] == "epoch,mean_loss"
    out = tmp_path / "net"
    assert main(["reconstruct", "--method", "sphr-net", "--dataset", str(dataset),
                 "--checkpoint", str(run / "checkpoint.sphp"), "--out", str(out)]) == EXIT_OK
    assert (out / "0002.sphc").exists()


def test_single_echo_and_export(dataset, tmp_path):
    out = tmp_path / "one"
    assert main(["reconstruct", "--method", "csa", "--echo", str(dataset / "echoes" / "0000.sphc"),
                 "--mask", str(dataset / "masks" / "0000.sphc"), "--out", str(out)]) == EXIT_OK
    png = tmp_path / "img.pgm"
    assert main(["export", "--input", str(out / "0000.sphc"), "--out", str(png)]) == EXIT_OK
    with Image.open(png) as im:
        arr = np.asarray(im)
    assert arr.max() == 255


def test_usage_errors(dataset, tmp_path):
    assert main(["reconstruct", "--method", "sphr-net", "--dataset", str(dataset),
                 "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["reconstruct", "--method", "csa", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["simulate", "--out", str(tmp_path / "s"), "--az-drop", "1.5"]) == EXIT_USAGE
    assert main(["simulate", "--out", str(tmp_path / "s"), "--dims", "15x16"]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE


def test_data_errors(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "t")]) == EXIT_DATA
    bad = tmp_path / "bad.sphc"
    bad.write_bytes(b"garbage!")
    assert main(["export", "--input", str(bad), "--out", str(tmp_path / "b.pgm")]) == EXIT_DATA
    recon = tmp_path / "recon"
    recon.mkdir()
    write_image(np.ones((8, 8)), recon / "0000.sphc")
    assert main(["eval", "--recon", str(recon), "--labels", str(tmp_path),
                 "--out", str(tmp_path / "m.csv")]) == EXIT_DATA


def test_to_gray():
    img = np.array([[1.0, 0.1], [0.01, 0.0]])
    g = to_gray(img, 40.0)
    assert g.tolist() == [[255, 128], [0, 0]]
    assert np.all(to_gray(np.zeros((2, 2))) == 0)
