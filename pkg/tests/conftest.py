import os

import pytest
import torch

from chronorec.config import RunConfig

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def amazon_fixture_path() -> str:
    return os.path.join(FIXTURES, "amazon_1k.csv")


def tiny_run_config(**kwargs) -> RunConfig:
    """Small float64 configuration for fast deterministic training tests."""
    cfg = RunConfig()
    cfg.model.d = 16
    cfg.model.layers = 1
    cfg.model.heads = 2
    cfg.model.ffn_mult = 2
    cfg.model.dtype = "float64"
    cfg.time_encoder.kind = "gaussian"
    cfg.time_encoder.sigma = 0.05
    cfg.diffusion.T = 50
    cfg.diffusion.infer_steps = 5
    cfg.train.max_epochs = 2
    cfg.train.batch_size_train = 64
    cfg.train.batch_size_eval = 32
    cfg.eval.ks = (1, 5, 10)
    for key, value in kwargs.items():
        section, _, name = key.partition("__")
        setattr(getattr(cfg, section), name, value)
    return cfg.validate()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training benchmarks")
