import json
import subprocess
import sys

import numpy as np
import pytest

from jointmae import sample_path
from jointmae.geometry import read_pgm
from jointmae.pipeline.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, parse_view


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert main(["pretrain", "--preset", "tiny", "--out-dir", str(out)]) == EXIT_OK
    return out


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["train"]) == EXIT_USAGE
        assert "invalid choice" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert main(["project", "--input", str(sample_path()), "--out", "x.pgm", "--colour"]) == EXIT_USAGE

    def test_missing_file(self, tmp_path, capsys):
        assert main(["project", "--input", str(tmp_path / "nope.xyz"), "--out", str(tmp_path / "o.pgm")]) == EXIT_USAGE
        assert "no such file" in capsys.readouterr().err

    def test_bad_view(self, tmp_path):
        assert main(["project", "--input", str(sample_path()), "--view", "north", "--out",
                     str(tmp_path / "o.pgm")]) == EXIT_USAGE

    def test_invalid_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"mask_ratio": 1.5}))
        assert main(["pretrain", "--config", str(tmp_path / "c.json")]) == EXIT_USAGE

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "bad.jmae").write_bytes(b"not a checkpoint")
        assert main(["probe", "--checkpoint", str(tmp_path / "bad.jmae")]) == EXIT_USAGE

    def test_unwritable_output_is_runtime_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        out = blocker / "sub" / "o.pgm"
        assert main(["project", "--input", str(sample_path()), "--out", str(out)]) == EXIT_RUNTIME

    def test_process_exit_status(self, tmp_path):
        done = subprocess.run([sys.executable, "-m", "jointmae", "project", "--input", str(tmp_path / "x.xyz"),
                               "--out", str(tmp_path / "o.pgm")], capture_output=True, text=True)
        assert done.returncode == EXIT_USAGE and done.stderr


class TestProject:
    @pytest.mark.parametrize("name", ["torus.xyz", "cone.xyz"])
    def test_bundled_sample_nonzero(self, tmp_path, name):
        out = tmp_path / "depth.pgm"
        assert main(["project", "--input", str(sample_path(name)), "--view", "30,20,64", "--out", str(out)]) == 0
        img = read_pgm(out)
        assert img.shape == (64, 64) and np.count_nonzero(img) > 0

    def test_parse_view(self):
        v = parse_view("10,20", 96)
        assert (v.height, v.width) == (96, 96)
        assert parse_view("0,0,32", 96).height == 32


class TestGradcheck:
    def test_exit_zero(self, capsys):
        assert main(["gradcheck", "--seeds", "2"]) == EXIT_OK
        assert "FAIL" not in capsys.readouterr().out


class TestRunCommands:
    def test_pretrain_outputs(self, tiny_ckpt):
        for name in ("last.jmae", "log.csv", "config.json", "loss_curves.png"):
            assert (tiny_ckpt / name).stat().st_size > 0

    def test_probe(self, tiny_ckpt, capsys):
        assert main(["probe", "--checkpoint", str(tiny_ckpt / "last.jmae"), "--baseline"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "probe accuracy" in out and "random-init accuracy" in out

    def test_probe_inline_dataset(self, tiny_ckpt, capsys):
        spec = json.dumps({"classes": ["sphere", "cube"], "train_per_class": 3, "test_per_class": 2})
        assert main(["probe", "--checkpoint", str(tiny_ckpt / "last.jmae"), "--dataset", spec]) == EXIT_OK

    def test_reconstruct(self, tiny_ckpt, tmp_path):
        assert main(["reconstruct", "--checkpoint", str(tiny_ckpt / "last.jmae"), "--input", str(sample_path()),
                     "--out-dir", str(tmp_path)]) == EXIT_OK
        for name in ("reconstructed.xyz", "depth_reconstructed.pgm", "panels.png"):
            assert (tmp_path / name).exists()

    def test_report(self, tiny_ckpt, tmp_path):
        assert main(["report", "--log", str(tiny_ckpt / "log.csv"), "--out", str(tmp_path / "l.png")]) == EXIT_OK
        assert (tmp_path / "l.png").stat().st_size > 0

    def test_ablate_writes_csv_and_figure(self, tmp_path):
        out = tmp_path / "ratio.csv"
        assert main(["ablate", "--preset", "tiny", "--epochs", "1", "--axis", "ratio", "--out-dir", str(tmp_path),
                     "--out", str(out)]) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 5 and lines[0].startswith("axis,arm,probe_accuracy")
        assert out.with_suffix(".png").exists()
