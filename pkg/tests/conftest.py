import numpy as np
import pytest
import torch

from flowrenderer.datamodel import make_synthetic_dataset, make_synthetic_sequence
from flowrenderer.pipeline import FlowRendererModel, ModelConfig
from flowrenderer.training import TrainConfig

TINY = dict(
    resolution=64,
    motion_dim=16,
    mapping_layers=1,
    window_radius=2,
    enc_stem=(16, 32),
    enc_channels=(8, 8, 8),
    flow_stem=(8, 16),
    flow_channels=(4, 8, 8),
    dec_width=16,
    dec_res_blocks=1,
    unet_depth=2,
    unet_width=8,
)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return FlowRendererModel(tiny_config)


@pytest.fixture
def tiny_train_config(tiny_config, tmp_path):
    return TrainConfig(
        model=tiny_config,
        epochs_per_phase=3,
        steps_per_epoch=2,
        decay_epoch=1,
        batch_size=2,
        output_dir=str(tmp_path / "run"),
    )


@pytest.fixture(scope="session")
def seq8():
    return make_synthetic_sequence(0, 8, 64)


@pytest.fixture(scope="session")
def two_seqs():
    return make_synthetic_dataset(3, 2, 4, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
