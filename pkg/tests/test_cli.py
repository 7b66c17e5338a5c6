import csv
import hashlib

import numpy as np
import pytest

from polcolor import cli, polmath
from polcolor import rasterio as pras


def run(*argv):
    return cli.main([str(a) for a in argv])


def digests(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "scene", "--width", 32, "--height", 32, "--seed", 1) == 0
    assert run("train", "--data", root / "scene", "--out", root / "model" / "m.pckp", "--epochs", 2,
               "--patch", 16, "--batch-pixels", 128, "--seed", 3) == 0
    assert run("colorize", "--input", root / "scene" / "vv.pras", "--checkpoint", root / "model" / "m.pckp",
               "--out", root / "recon") == 0
    return root


def test_synth_files(tmp_path):
    assert run("synth", "--out", tmp_path / "a", "--width", 64, "--height", 64, "--seed", 4) == 0
    rasters = sorted(p.name for p in (tmp_path / "a").glob("*.pras"))
    assert rasters == ["classes.pras", "cov.pras", "hh.pras", "hv.pras", "vv.pras"]
    assert (tmp_path / "a" / "manifest.txt").exists() and (tmp_path / "a" / "synth_config.txt").exists()
    first = digests(tmp_path / "a")
    assert run("synth", "--out", tmp_path / "a", "--width", 64, "--height", 64, "--seed", 4) == 0
    assert digests(tmp_path / "a") == first


def test_synth_bad_dims(tmp_path):
    assert run("synth", "--out", tmp_path / "x", "--width", 30) == 2


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("# scene\nwidth = 16\nheight=16\nseed=9\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "s", "--seed", 2) == 0
    log = (tmp_path / "s" / "synth_config.txt").read_text()
    assert "width=16" in log and "seed=2" in log
    cfg.write_text("colour=red\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "t") == 2


def test_train_loss_csv(workdir):
    with open(workdir / "model" / "m.loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    # 4 patches of 256 pixels, 2 mini-batches each, 2 epochs
    assert len(rows) == 16 and rows[-1]["step"] == "16"
    assert abs(float(rows[0]["loss"]) - np.log(32) / 32) <= 1e-6
    assert (workdir / "model" / "train_config.txt").exists()


def test_train_resume_bit_identical(workdir, tmp_path):
    args = ["--data", workdir / "scene", "--patch", 16, "--batch-pixels", 128, "--seed", 3]
    assert run("train", *args, "--out", tmp_path / "half.pckp", "--epochs", 1) == 0
    assert run("train", *args, "--out", tmp_path / "resumed.pckp", "--epochs", 2,
               "--resume", tmp_path / "half.pckp") == 0
    assert (tmp_path / "resumed.pckp").read_bytes() == (workdir / "model" / "m.pckp").read_bytes()
    straight = (workdir / "model" / "m.loss.csv").read_text().splitlines()
    resumed = (tmp_path / "resumed.loss.csv").read_text().splitlines()
    assert resumed[1:] == straight[-len(resumed) + 1:]
    assert run("train", *args[:-1], 4, "--out", tmp_path / "x.pckp", "--epochs", 2,
               "--resume", tmp_path / "half.pckp") == 2


def test_train_missing_data(tmp_path):
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "m.pckp") == 2


def test_colorize_outputs_and_audits(workdir):
    out = workdir / "recon"
    for name in ("recon.pras", "params.pras", "flags.pras", "recon_pauli.png", "colorize_config.txt"):
        assert (out / name).exists()
    raw = pras.to_covariance(pras.read(out / "recon.pras"))
    vv = pras.read(workdir / "scene" / "vv.pras").plane
    flags = pras.read(out / "flags.pras").plane
    ok = flags == 0
    assert np.array_equal(raw[..., 2, 2].real[ok], vv[ok])
    feat, _ = polmath.normalize(pras.to_covariance(pras.read(out / "recon.pras"), repair=True))
    assert np.all(polmath.psd_check(feat).margin >= -1e-6)


def test_colorize_bad_input(workdir, tmp_path):
    pras.write(tmp_path / "odd.pras", pras.PolRaster(pras.Layout.GRAY1, np.ones((10, 12))))
    assert run("colorize", "--input", tmp_path / "odd.pras", "--checkpoint", workdir / "model" / "m.pckp",
               "--out", tmp_path / "o") == 2
    assert run("colorize", "--input", workdir / "scene" / "cov.pras",
               "--checkpoint", workdir / "model" / "m.pckp", "--out", tmp_path / "o") == 2


def test_eval_truth_vs_truth(workdir, tmp_path):
    cov = workdir / "scene" / "cov.pras"
    assert run("eval", "--recon", cov, "--truth", cov, "--out", tmp_path) == 0
    with open(tmp_path / "metrics.csv") as fh:
        rows = {r["name"]: r for r in csv.DictReader(fh)}
    assert all(float(rows[n]["mae_total"]) == 0 for n in polmath.PARAM_NAMES)
    assert all(abs(float(rows[n]["coi_abs"]) - 1) <= 1e-6 for n in ("C11", "C22", "C33", "C13", "C23", "C12"))
    with open(tmp_path / "bartlett_hist.csv") as fh:
        assert sum(int(r["count"]) for r in csv.DictReader(fh)) == 32 * 32
    assert np.all(pras.read(tmp_path / "bartlett.pras").plane <= 1e-6)


def test_eval_with_checkpoint(workdir, tmp_path):
    assert run("eval", "--recon", workdir / "recon" / "recon.pras", "--truth", workdir / "scene" / "cov.pras",
               "--checkpoint", workdir / "model" / "m.pckp", "--out", tmp_path) == 0
    assert (tmp_path / "bartlett.png").exists()


def test_decomp_freeman_volume_green(tmp_path):
    vol = np.array([[1, 0, 1 / 3], [0, 2 / 3, 0], [1 / 3, 0, 1]], complex)
    pras.write(tmp_path / "vol.pras", pras.from_covariance(np.broadcast_to(vol, (8, 8, 3, 3))))
    assert run("decomp", "--input", tmp_path / "vol.pras", "--method", "freeman", "--out", tmp_path / "d") == 0
    from PIL import Image
    img = np.asarray(Image.open(tmp_path / "d" / "freeman.png"))
    assert np.all(img[..., 1] > img[..., 0]) and np.all(img[..., 1] > img[..., 2])
    pv = pras.read(tmp_path / "d" / "freeman_pv.pras").plane
    assert np.allclose(pv, 8 / 3, rtol=1e-6)


def test_decomp_halpha_sea_surface(tmp_path):
    assert run("synth", "--out", tmp_path / "sea", "--width", 32, "--height", 32, "--classes", "sea") == 0
    assert run("decomp", "--input", tmp_path / "sea" / "cov.pras", "--method", "halpha",
               "--out", tmp_path / "h") == 0
    zones = pras.read(tmp_path / "h" / "zones.pras").plane.astype(int)
    assert np.bincount(zones.ravel(), minlength=9).argmax() == 8
    assert (tmp_path / "h" / "zones.png").exists()


def test_decomp_unknown_method(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("decomp", "--input", tmp_path / "x.pras", "--method", "yamaguchi", "--out", tmp_path)
    assert exc.value.code == 2
