import hashlib
import json
import subprocess
import sys

import pytest
import torch

import gazefill
from gazefill.cli import build_parser, main
from gazefill.config import TrainConfig
from gazefill.data_pipeline import save_dataset
from gazefill.training import run_training


def run_cli(*argv):
    """Invoke the CLI in-process, capturing the exit code."""
    return main(list(argv))


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata") / "ds"
    save_dataset(gazefill.generate_toy_dataset(10, 10, seed=5,
                                               image_size=32), root)
    return root


@pytest.fixture(scope="module")
def trained_dir(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    ds = gazefill.load_dataset(toy_dir)
    cfg = TrainConfig(resolution=32, batch_size=4, total_iterations=4,
                      warm_iterations=2, pam_iterations=4, seed=2,
                      out_dir=str(out), checkpoint_every=4, sample_every=4)
    run_training(cfg, ds.samples, ds.split)
    return out


class TestParser:
    def test_unknown_flag_exits_with_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["train", "--frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand_exits_with_usage(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2

    @pytest.mark.parametrize("sub", ["toy-data", "preprocess", "pretrain",
                                     "train", "correct", "animate",
                                     "evaluate"])
    def test_every_subcommand_has_help(self, sub, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([sub, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out


class TestToyDataCommand:
    def test_same_seed_twice_same_digests(self, tmp_path):
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("toy-data", "--out", str(out), "--n-x", "3",
                           "--n-y", "3", "--seed", "7", "--size", "16") == 0
            payload = b"".join(sorted(p.read_bytes()
                                      for p in out.rglob("*") if p.is_file()))
            digests.append(hashlib.sha256(payload).hexdigest())
        assert digests[0] == digests[1]


class TestPreprocessCommand:
    def test_reports_counts(self, toy_dir, tmp_path, capsys):
        out = tmp_path / "summary.json"
        assert run_cli("preprocess", "--data", str(toy_dir),
                       "--out", str(out)) == 0
        summary = json.loads(out.read_text())
        assert summary["samples"] == 20
        assert summary["eye_box_hw"] == [4, 6]

    def test_missing_directory_is_data_error(self, tmp_path, capsys):
        code = run_cli("preprocess", "--data", str(tmp_path / "nope"))
        assert code == 4
        assert "error[data]" in capsys.readouterr().err


class TestTrainAndInference:
    def test_pretrain_writes_checkpoint_and_curve(self, toy_dir, tmp_path):
        out = tmp_path / "pam.pt"
        assert run_cli("pretrain", "--data", str(toy_dir), "--out", str(out),
                       "--resolution", "32", "--batch-size", "4",
                       "--pam-iterations", "3", "--seed", "1") == 0
        assert out.exists()
        curve = [json.loads(x) for x in
                 open(out.with_suffix(".losses.jsonl"))]
        assert len(curve) == 3

    def test_correct_and_animate_roundtrip(self, toy_dir, trained_dir,
                                           tmp_path):
        ckpt = trained_dir / "checkpoints" / "latest.pt"
        image = next((toy_dir / "y").glob("*.png"))
        landmarks = toy_dir / "landmarks.jsonl"
        out = tmp_path / "corrected.png"
        assert run_cli("correct", "--input", str(image), "--landmarks",
                       str(landmarks), "--checkpoint", str(ckpt),
                       "--out", str(out)) == 0
        from PIL import Image
        with Image.open(out) as im:
            assert im.size == (32, 32)

        strip = tmp_path / "anim.png"
        assert run_cli("animate", "--input", str(image), "--landmarks",
                       str(landmarks), "--checkpoint", str(ckpt),
                       "--frames", "4", "--t-min", "-0.5", "--t-max", "1.5",
                       "--out", str(strip)) == 0
        with Image.open(strip) as im:
            assert im.size == (128, 32)

    def test_correct_missing_image_is_data_error(self, trained_dir, toy_dir,
                                                 tmp_path, capsys):
        code = run_cli("correct", "--input", str(tmp_path / "missing.png"),
                       "--landmarks", str(toy_dir / "landmarks.jsonl"),
                       "--checkpoint",
                       str(trained_dir / "checkpoints" / "latest.pt"),
                       "--out", str(tmp_path / "o.png"))
        assert code == 4

    def test_missing_checkpoint_is_io_error(self, toy_dir, tmp_path, capsys):
        image = next((toy_dir / "y").glob("*.png"))
        code = run_cli("correct", "--input", str(image), "--landmarks",
                       str(toy_dir / "landmarks.jsonl"), "--checkpoint",
                       str(tmp_path / "missing.pt"), "--out",
                       str(tmp_path / "o.png"))
        assert code == 6
        assert "error[io]" in capsys.readouterr().err


class TestEvaluateCommand:
    def test_writes_report_and_csvs(self, toy_dir, trained_dir, tmp_path):
        out = tmp_path / "report.json"
        assert run_cli("evaluate", "--data", str(toy_dir), "--checkpoint",
                       str(trained_dir / "checkpoints" / "latest.pt"),
                       "--out", str(out)) == 0
        report = json.loads(out.read_text())
        assert report["background"]["msssim_mean"] == 1.0
        assert report["background"]["perceptual_mean"] == 0.0
        assert report["background"]["metadata"]["backend"] == "proxy"
        assert "eye_region" in report and "latent" in report
        assert out.with_suffix(".latent.csv").exists()
        assert out.with_suffix(".moments.csv").exists()

    def test_resolution_mismatch_is_config_error(self, trained_dir,
                                                 tmp_path, capsys):
        other = tmp_path / "ds64"
        save_dataset(gazefill.generate_toy_dataset(6, 6, seed=5,
                                                   image_size=64), other)
        code = run_cli("evaluate", "--data", str(other), "--checkpoint",
                       str(trained_dir / "checkpoints" / "latest.pt"),
                       "--out", str(tmp_path / "r.json"))
        assert code == 3
        assert "error[config]" in capsys.readouterr().err

    def test_external_backend_without_weights_is_config_error(
            self, toy_dir, trained_dir, tmp_path, capsys):
        code = run_cli("evaluate", "--data", str(toy_dir), "--checkpoint",
                       str(trained_dir / "checkpoints" / "latest.pt"),
                       "--backend", "external",
                       "--out", str(tmp_path / "r.json"))
        assert code == 3

    def test_external_backend_with_weights_runs(self, toy_dir, trained_dir,
                                                tmp_path):
        from gazefill.evaluation import ExternalPerceptualDistance

        g = torch.Generator().manual_seed(0)
        backend = ExternalPerceptualDistance(
            [torch.randn(4, 3, 3, 3, generator=g)], [torch.rand(4,
                                                                generator=g)])
        weights = tmp_path / "w.pt"
        backend.save(weights)
        out = tmp_path / "report.json"
        assert run_cli("evaluate", "--data", str(toy_dir), "--checkpoint",
                       str(trained_dir / "checkpoints" / "latest.pt"),
                       "--backend", "external", "--weights", str(weights),
                       "--out", str(out)) == 0
        report = json.loads(out.read_text())
        assert report["background"]["metadata"]["backend"] == "external"
        assert report["background"]["perceptual_mean"] == 0.0

    def test_console_script_entrypoint(self):
        proc = subprocess.run([sys.executable, "-m", "gazefill.cli",
                               "--version"], capture_output=True, text=True)
        assert proc.returncode == 0


class TestSplitFlag:
    def test_evaluate_respects_split_flag(self, toy_dir, trained_dir,
                                          tmp_path):
        import json as _json

        alt = tmp_path / "alt_split.json"
        original = _json.loads((toy_dir / "split.json").read_text())
        # swap one test sample out to prove the alternate file is honored
        alt_split = dict(original)
        alt_split["test_y"] = original["test_y"][:1]
        alt.write_text(_json.dumps(alt_split))
        out = tmp_path / "report.json"
        assert run_cli("evaluate", "--data", str(toy_dir), "--checkpoint",
                       str(trained_dir / "checkpoints" / "latest.pt"),
                       "--split", str(alt), "--out", str(out)) == 0
        report = _json.loads(out.read_text())
        assert report["background"]["count"] == 1
