"""Shared fixtures: a tiny fp64 model and a handful of synthetic examples."""
import numpy as np
import pytest

from latentvr import data
from latentvr.backbone import Backbone
from latentvr.config import ModelConfig, RunConfig, TrainConfig


def tiny_config(**overrides) -> ModelConfig:
    """Small enough for finite differences, big enough to exercise every path."""
    base = dict(n_layers=2, n_heads=2, d_model=16, grid=4, image_side=16, rank=2,
                latent_steps=2, replay_k=3, window=2, max_depth=1, alpha=4,
                max_len=128, ffn_mult=2, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def randomize(model: Backbone, seed: int = 0, scale: float = 0.3) -> Backbone:
    """Give zero-initialised factors and encodings non-trivial values."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith((".B", "depth_enc", "router.b2")):
            t.data = rng.normal(0.0, scale, size=t.shape)
    return model


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model(cfg):
    return randomize(Backbone(cfg, seed=1))


@pytest.fixture(scope="session")
def examples():
    return data.generate_dataset(seed=7, n=24, grid=4, image_side=16)


def tiny_run(epochs=2, **train) -> RunConfig:
    tc = dict(epochs=epochs, lr=1e-3, batch=4, val_size=6, early_epochs=2, probe_size=2)
    tc.update(train)
    return RunConfig(model=tiny_config(), train=TrainConfig(**tc))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
