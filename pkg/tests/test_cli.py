import csv
import io

import numpy as np
import pytest

from splatwild.cli import RunConfig, main
from splatwild.io import read_frames, read_gaussians
from splatwild.pointcloud import PointCloud, read_ply, write_ply

SMALL_SCENE = "n_frames = 3\nwidth = 24\nheight = 24\npixels_per_unit = 6\n"


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "scene.cfg").write_text(SMALL_SCENE)
    assert main(["synth", "--config", str(d / "scene.cfg"), "--out", str(d / "data")]) == 0
    return d


def test_defaults_match_published_values():
    c = RunConfig()
    assert (c.iterations, c.activation_iter, c.lambda_local, c.lambda_global, c.lambda_dssim) == (7000, 500, 0.4, 2.8, 0.2)
    assert (c.n, c.k, c.tau, c.gamma1, c.gamma2, c.gamma3) == (80, 3, 3.5, 0.003, 2, 0.075)
    assert c.resolved().t_max == 7000


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    assert main(["align-plan", "--frames", "4", "--batch", "2", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert main([]) == 1


def test_missing_input_is_data_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert "nope" in capsys.readouterr().err


def test_train_without_data_is_usage_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "o")]) == 1


def test_bad_config_value_is_data_error(tmp_path, data_dir, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("iterations = many\n")
    assert main(["train", "--config", str(cfg), "--data", str(data_dir / "data"), "--out", str(tmp_path / "o")]) == 2
    assert "iterations" in capsys.readouterr().err


def test_bad_thread_count(monkeypatch, capsys):
    monkeypatch.setenv("SPLATWILD_THREADS", "zero")
    assert main(["align-plan", "--frames", "4", "--batch", "2"]) == 1


def test_synth_outputs(data_dir):
    frames = read_frames(data_dir / "data")
    assert len(frames) == 3 and frames[0].image.shape == (24, 24, 3)
    assert (data_dir / "data" / "tracks" / "manifest.txt").exists()
    assert len(list((data_dir / "data" / "clean").glob("*.png"))) == 3


def test_train_writes_outputs_and_prints_config(tmp_path, data_dir, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data = {data_dir / 'data'}\niterations = 6\nactivation_iter = 2\nguide = true\nn = 4\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--dump-guide", str(tmp_path / "g.tsv")]) == 0
    err = capsys.readouterr().err
    assert "# resolved config" in err and "# seed = 0" in err
    rows = list(csv.reader((out / "log.csv").open()))
    assert rows[0] == ["iteration", "l1", "dssim", "n_gaussians", "masked_fraction"] and len(rows) == 7
    assert len(read_gaussians(out / "gaussians.ply")) > 0
    assert len(list((out / "masks").glob("mask_*.png"))) == 3
    assert (tmp_path / "g.tsv").read_text().startswith("i\tj\tk\tmembers")


def test_render_matches_train_renders(tmp_path, data_dir):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data_dir / "data"), "--out", str(out), "--iterations", "3", "--no-mask"]) == 0
    assert main(["render", "--gaussians", str(out / "gaussians.ply"), "--data", str(data_dir / "data"),
                 "--out", str(tmp_path / "r")]) == 0
    for p in (out / "renders").glob("*.png"):
        assert p.read_bytes() == (tmp_path / "r" / p.name).read_bytes()


def test_metrics_csv(tmp_path, data_dir, capsys):
    d = data_dir / "data"
    assert main(["metrics", "--pred", str(d / "clean"), "--gt", str(d / "clean")]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["frame", "psnr", "ssim"]
    assert rows[-1][0] == "mean" and rows[-1][1] == "inf"
    assert len(rows) == 5


def test_mask_debug(tmp_path, data_dir):
    assert main(["mask-debug", "--data", str(data_dir / "data"), "--out", str(tmp_path / "dbg"),
                 "--iteration", "600"]) == 0
    assert any((tmp_path / "dbg").iterdir())


def test_align_plan_tsv(capsys):
    assert main(["align-plan", "--frames", "12", "--batch", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "start\tindices\tfixed_prefix"
    assert lines[1] == "0\t0,1,2,3\t0" and lines[-1] == "8\t8,9,10,11\t2"


def test_align_plan_odd_batch(capsys):
    assert main(["align-plan", "--frames", "12", "--batch", "5"]) == 1


def test_align_run_writes_trajectory(tmp_path):
    assert main(["align-run", "--frames", "10", "--batch", "4", "--out", str(tmp_path / "t.txt")]) == 0
    assert len((tmp_path / "t.txt").read_text().splitlines()) == 10


def test_sample_points(tmp_path, capsys):
    rng = np.random.default_rng(0)
    write_ply(tmp_path / "in.ply", PointCloud(rng.uniform(size=(300, 3)), rng.uniform(size=300)))
    assert main(["sample-points", "--input", str(tmp_path / "in.ply"), "--output", str(tmp_path / "out.ply"),
                 "--n", "3", "--k", "1"]) == 0
    kept = read_ply(tmp_path / "out.ply")
    assert 0 < len(kept) < 300
    assert f"kept {len(kept)} of 300" in capsys.readouterr().out
