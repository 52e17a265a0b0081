"""Shared fixtures: toy data, bundles, and the desk-scale training runs.

The expensive session fixtures (mirror pretraining, the 1000-iteration
smoke run) are computed once per session and shared between the unit suites
and the acceptance suite.
"""

import json
from types import SimpleNamespace

import pytest
import torch

from gazefill import generate_toy_dataset, pretrain
from gazefill.config import TrainConfig
from gazefill.networks import ArchitectureConfig, build_bundle, tiny_config
from gazefill.pam import PretrainConfig
from gazefill.training import run_training

TOY_SEED = 11
RUN_SEED = 7

_acceptance_results: list[tuple[str, str, str]] = []


def record_acceptance(number: int, description: str, passed: bool = True,
                      detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    _acceptance_results.append((f"{number:02d}", status,
                                f"{description}{detail}"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, text in sorted(_acceptance_results):
        terminalreporter.write_line(f"criterion {number}: {status} - {text}")


@pytest.fixture(scope="session")
def toy():
    return generate_toy_dataset(64, 64, seed=TOY_SEED, image_size=64)


@pytest.fixture(scope="session")
def arch64():
    return ArchitectureConfig(resolution=64)


@pytest.fixture(scope="session")
def bundle64(arch64):
    """Untrained shared bundle; kept in eval mode, treat as read-only."""
    return build_bundle(arch64, seed=123).eval()


@pytest.fixture()
def fresh_bundle64(arch64):
    return build_bundle(arch64, seed=123)


@pytest.fixture()
def tiny_double_bundle():
    """Narrow 16x16 double-precision bundle for numeric checks."""
    return build_bundle(tiny_config(16), seed=5).to(torch.float64)


@pytest.fixture(scope="session")
def mirror_pretrain(toy):
    """Init-state and pretrained mirror autoencoders (decayed schedule,
    batch 16 smooths the free code-scale drift at desk scale)."""
    init_bundle = build_bundle(ArchitectureConfig(resolution=64),
                               seed=RUN_SEED)
    trained_bundle = build_bundle(ArchitectureConfig(resolution=64),
                                  seed=RUN_SEED)
    losses = pretrain(trained_bundle.g_pre, toy.get(toy.split.train_y),
                      PretrainConfig(iterations=800, batch_size=16,
                                     seed=RUN_SEED))
    return SimpleNamespace(init=init_bundle, trained=trained_bundle,
                           losses=losses, dataset=toy)


@pytest.fixture(scope="session")
def smoke(toy, tmp_path_factory):
    """The desk-scale run: 64x64, batch 8, 1000 joint iterations."""
    out_dir = tmp_path_factory.mktemp("smoke_run")
    cfg = TrainConfig(resolution=64, batch_size=8, total_iterations=1000,
                      warm_iterations=1000, pam_iterations=400,
                      seed=RUN_SEED, out_dir=str(out_dir),
                      checkpoint_every=200, sample_every=500)
    result = run_training(cfg, toy.samples, toy.split)
    rows = [json.loads(line) for line in open(result.paths.loss_log)]
    timings = [json.loads(line) for line in open(result.paths.timing_log)]
    return SimpleNamespace(result=result, rows=rows, timings=timings,
                           cfg=cfg, dataset=toy)
