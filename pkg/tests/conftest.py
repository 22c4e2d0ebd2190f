import numpy as np
import pytest
import torch

from mmgpvae.config import ModelConfig
from mmgpvae.persistence import Dataset

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def tiny_config(**kw):
    d = dict(mode="multimodal", T=8, F=5, p_a=1, p_s=1, p_b=1, enc_hidden_a=[4], enc_hidden_b=[4],
             dec_hidden=[4], sigma_y2_init=1.0, ell0=3.0, batch_size=3, epochs=2)
    d.update(kw)
    return ModelConfig(**d)


def tiny_dataset(K=6, M=3, N=4, T=8, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        Y_A=rng.standard_normal((K, M, T)) * 0.5,
        Y_B=rng.poisson(1.0, (K, N, T)).astype(float),
        train_idx=np.arange(K - 2), test_idx=np.arange(K - 2, K),
        truth={}, meta={"seed": seed},
    )


@pytest.fixture
def tiny():
    return tiny_config, tiny_dataset


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
