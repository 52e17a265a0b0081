import json
import subprocess
import sys

import pytest

import gazefill
from gazefill.checkpoint import load_checkpoint
from gazefill.config import TrainConfig
from gazefill.errors import ConfigError, TrainingDivergedError
from gazefill.training import (load_bundle, run_training, sample_batch)

_RUN_SNIPPET = """
import json, sys
import gazefill
from gazefill.config import TrainConfig
from gazefill.training import run_training

mode = sys.argv[1]
out = sys.argv[2]
ds = gazefill.generate_toy_dataset(10, 10, seed=11, image_size=16)
cfg = TrainConfig(resolution=16, batch_size=4, total_iterations=8,
                  warm_iterations=4, pam_iterations=5, seed=3, out_dir=out,
                  checkpoint_every=4, sample_every=8)
if mode == "straight":
    run_training(cfg, ds.samples, ds.split)
elif mode == "resume":
    run_training(cfg, ds.samples, ds.split, resume_from=sys.argv[3])
"""


def _run_subprocess(args):
    proc = subprocess.run([sys.executable, "-c", _RUN_SNIPPET, *args],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


@pytest.fixture(scope="module")
def tiny16(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny16")
    ds = gazefill.generate_toy_dataset(10, 10, seed=11, image_size=16)
    cfg = TrainConfig(resolution=16, batch_size=4, total_iterations=6,
                      warm_iterations=3, pam_iterations=5, seed=3,
                      out_dir=str(out / "run"), checkpoint_every=3,
                      sample_every=6)
    result = run_training(cfg, ds.samples, ds.split)
    return ds, cfg, result


class TestRunTraining:
    def test_produces_logs_checkpoints_and_samples(self, tiny16):
        _, cfg, result = tiny16
        rows = [json.loads(x) for x in open(result.paths.loss_log)]
        assert [r["iteration"] for r in rows] == list(range(1, 7))
        for key in ("l_x_recon", "l_x_adv", "l_y_recon", "l_synth_recon",
                    "l_fp", "l_y_adv", "lr"):
            assert all(key in r for r in rows)
        assert result.paths.iter_checkpoint(3).exists()
        assert result.paths.iter_checkpoint(6).exists()
        assert result.paths.latest_checkpoint.exists()
        assert result.paths.pam_checkpoint.exists()
        assert (result.paths.samples / "iter_000006.png").exists()
        timing_rows = [json.loads(x) for x in open(result.paths.timing_log)]
        assert len(timing_rows) == 6

    def test_lr_schedule_recorded_in_log(self, tiny16):
        _, cfg, result = tiny16
        rows = [json.loads(x) for x in open(result.paths.loss_log)]
        assert rows[0]["lr"] == pytest.approx(cfg.lr_main)
        assert rows[-1]["lr"] == pytest.approx(cfg.lr_main / 3)

    def test_checkpoint_holds_config_digest(self, tiny16):
        _, cfg, result = tiny16
        ckpt = load_checkpoint(result.paths.latest_checkpoint)
        assert ckpt.metadata["config_digest"] == cfg.digest()
        assert ckpt.metadata["resolution"] == 16
        assert ckpt.metadata["iteration"] == 6

    def test_load_bundle_restores_and_freezes(self, tiny16):
        _, _, result = tiny16
        bundle, meta = load_bundle(result.paths.latest_checkpoint)
        assert meta["iteration"] == 6
        assert all(not p.requires_grad
                   for p in bundle.g_pre.parameters())
        with pytest.raises(ConfigError):
            load_bundle(result.paths.latest_checkpoint,
                        expected_resolution=64)

    def test_empty_split_rejected(self, tmp_path):
        ds = gazefill.generate_toy_dataset(4, 4, seed=1, image_size=16)
        cfg = TrainConfig(resolution=16, total_iterations=1,
                          warm_iterations=0, pam_iterations=1,
                          out_dir=str(tmp_path / "r"))
        with pytest.raises(ConfigError):
            run_training(cfg, ds.samples,
                         type(ds.split)(train_x=[], train_y=[],
                                        test_x=[], test_y=[]))

    def test_zero_total_iterations_still_writes_pam(self, tmp_path):
        ds = gazefill.generate_toy_dataset(6, 6, seed=2, image_size=16)
        cfg = TrainConfig(resolution=16, batch_size=4, total_iterations=0,
                          warm_iterations=0, pam_iterations=4, seed=1,
                          out_dir=str(tmp_path / "r"))
        result = run_training(cfg, ds.samples, ds.split)
        assert result.paths.pam_checkpoint.exists()
        assert not result.paths.loss_log.exists() or \
            not open(result.paths.loss_log).read().strip()
        assert result.paths.latest_checkpoint.exists()

    def test_nonfinite_loss_aborts_keeping_checkpoint(self, tmp_path,
                                                      monkeypatch):
        ds = gazefill.generate_toy_dataset(6, 6, seed=2, image_size=16)
        cfg = TrainConfig(resolution=16, batch_size=4, total_iterations=4,
                          warm_iterations=0, pam_iterations=2, seed=1,
                          out_dir=str(tmp_path / "r"), checkpoint_every=1)
        calls = {"n": 0}
        import gazefill.training as training_mod
        real = training_mod.train_step_gcm

        def poisoned(*args, **kwargs):
            calls["n"] += 1
            report = real(*args, **kwargs)
            if calls["n"] == 3:
                report["l_x_recon"] = float("nan")
            return report

        monkeypatch.setattr(training_mod, "train_step_gcm", poisoned)
        with pytest.raises(TrainingDivergedError, match="iteration 3"):
            run_training(cfg, ds.samples, ds.split)
        # the last good periodic checkpoint (iteration 2) survives
        assert (tmp_path / "r" / "checkpoints" / "iter_000002.pt").exists()

    def test_pam_checkpoint_can_seed_training(self, tiny16, tmp_path):
        ds, cfg, result = tiny16
        cfg2 = TrainConfig(**{**cfg.__dict__,
                              "out_dir": str(tmp_path / "r2"),
                              "total_iterations": 1, "warm_iterations": 1,
                              "weights": cfg.weights})
        res2 = run_training(cfg2, ds.samples, ds.split,
                            pam_checkpoint=result.paths.pam_checkpoint)
        assert res2.final_iteration == 1


class TestDeterminismAndResume:
    def test_sample_batch_is_pure_in_iteration(self, toy):
        samples = toy.get(toy.split.train_y)
        a = [s.id for s in sample_batch(samples, 7, 12, 3, 8)]
        b = [s.id for s in sample_batch(samples, 7, 12, 3, 8)]
        c = [s.id for s in sample_batch(samples, 7, 13, 3, 8)]
        assert a == b
        assert a != c

    def test_two_fresh_runs_are_bit_identical(self, tmp_path):
        logs = []
        for name in ("a", "b"):
            out = tmp_path / name
            _run_subprocess(["straight", str(out)])
            logs.append((out / "loss_log.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_resume_matches_uninterrupted_run_bitwise(self, tmp_path):
        straight = tmp_path / "straight"
        _run_subprocess(["straight", str(straight)])
        ckpt = straight / "checkpoints" / "iter_000004.pt"
        assert ckpt.exists()
        resumed = tmp_path / "resumed"
        _run_subprocess(["resume", str(resumed), str(ckpt)])
        rows_straight = open(straight / "loss_log.jsonl").read().splitlines()
        rows_resumed = open(resumed / "loss_log.jsonl").read().splitlines()
        assert len(rows_resumed) == 4
        assert rows_resumed == rows_straight[4:8]

    def test_resume_refuses_foreign_config(self, tiny16, tmp_path):
        ds, cfg, result = tiny16
        other = TrainConfig(**{**cfg.__dict__, "seed": 999,
                               "weights": cfg.weights,
                               "out_dir": str(tmp_path / "x")})
        with pytest.raises(ConfigError, match="different config"):
            run_training(other, ds.samples, ds.split,
                         resume_from=result.paths.latest_checkpoint)
