import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmgpvae.exceptions import ShapeError
from mmgpvae.fourier_gp import build_fourier_basis
from mmgpvae.latent_model import LatentPartition, LoadingsMatrix, mix_latents, to_frequency_domain, to_time_domain


def random_loadings(rng, part, m_emb, n):
    return LoadingsMatrix(
        rng.standard_normal((m_emb, part.p_a)), rng.standard_normal((m_emb, part.p_s)),
        rng.standard_normal((n, part.p_s)), rng.standard_normal((n, part.p_b)),
        rng.standard_normal(m_emb), rng.standard_normal(n),
    )


def dense_block_matrix(W, part):
    m, n = W.m_emb, W.n_neurons
    full = np.zeros((m + n, part.P))
    full[:m, part.a] = W.W_A.detach().numpy()
    full[:m, part.s] = W.W_S1.detach().numpy()
    full[m:, part.s] = W.W_S2.detach().numpy()
    full[m:, part.b] = W.W_B.detach().numpy()
    return full, np.concatenate([W.d_A.detach().numpy(), W.d_B.detach().numpy()])


def loop_inverse_dft(coef, T):
    """Time series from real DFT coefficients, one basis function at a time."""
    out = np.zeros(T)
    for j, c in enumerate(coef):
        k = (j + 1) // 2
        for t in range(T):
            if j == 0:
                b = 1.0 / math.sqrt(T)
            elif 2 * k == T and j == T - 1:
                b = math.cos(math.pi * t) / math.sqrt(T)
            elif j % 2 == 1:
                b = math.sqrt(2.0 / T) * math.cos(2 * math.pi * k * t / T)
            else:
                b = math.sqrt(2.0 / T) * math.sin(2 * math.pi * k * t / T)
            out[t] += c * b
    return out


def test_partition_slices():
    part = LatentPartition(2, 1, 3)
    assert part.P == 6
    assert (part.a, part.s, part.b) == (slice(0, 2), slice(2, 3), slice(3, 6))
    assert part.behavior_rows == slice(0, 3) and part.neural_rows == slice(2, 6)
    assert part.block_names() == ["a", "s", "b"]
    assert LatentPartition(0, 2, 0).block_names() == ["s"]


def test_partition_rejects_empty_and_negative():
    with pytest.raises(ShapeError):
        LatentPartition(0, 0, 0)
    with pytest.raises(ShapeError):
        LatentPartition(-1, 2, 0)


@pytest.mark.parametrize("seed", range(50))
def test_mix_latents_matches_dense_block_oracle(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(0, 3, size=3).tolist() if seed % 5 else [1, 1, 1]
    part = LatentPartition(*sizes) if sum(sizes) else LatentPartition(1, 0, 0)
    m_emb, n, T = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(3, 12))
    W = random_loadings(rng, part, m_emb, n)
    z = rng.standard_normal((2, part.P, T))
    x_A, x_B = mix_latents(z, W, part)
    full, d = dense_block_matrix(W, part)
    x = np.einsum("ip,kpt->kit", full, z) + d[:, None]
    np.testing.assert_allclose(x_A.detach().numpy(), x[:, :m_emb], atol=1e-8)
    np.testing.assert_allclose(x_B.detach().numpy(), x[:, m_emb:], atol=1e-8)


@pytest.mark.parametrize("seed", range(50))
def test_to_time_domain_matches_loop_dft(seed):
    rng = np.random.default_rng(1000 + seed)
    T = int(rng.integers(3, 30))
    F = int(rng.integers(1, T + 1))
    basis = build_fourier_basis(T, F)
    coef = rng.standard_normal((2, F))
    got = to_time_domain(coef, basis).numpy()
    for p in range(2):
        np.testing.assert_allclose(got[p], loop_inverse_dft(coef[p], T), atol=1e-8)


def test_structural_zeros_block_cross_talk():
    part = LatentPartition(1, 1, 1)
    W = random_loadings(np.random.default_rng(0), part, 3, 4)
    z = torch.randn(part.P, 6, dtype=torch.float64, requires_grad=True)
    x_A, x_B = mix_latents(z, W, part)
    (gA,) = torch.autograd.grad(x_A.sum(), z)
    (gB,) = torch.autograd.grad(x_B.sum(), z)
    assert torch.all(gA[part.b] == 0)
    assert torch.all(gB[part.a] == 0)


def test_mix_latents_shape_errors():
    part = LatentPartition(1, 1, 1)
    W = random_loadings(np.random.default_rng(0), part, 2, 3)
    with pytest.raises(ShapeError):
        mix_latents(torch.zeros(2, 5, dtype=torch.float64), W, part)
    with pytest.raises(ShapeError):
        mix_latents(torch.zeros(3, 5, dtype=torch.float64), W, LatentPartition(2, 1, 0))


def test_loadings_shape_validation():
    with pytest.raises(ShapeError):
        LoadingsMatrix(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((4, 1)), np.zeros((4, 1)), np.zeros(2), np.zeros(4))
    with pytest.raises(ShapeError):
        LoadingsMatrix(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((4, 2)), np.zeros((4, 1)), np.zeros(2), np.zeros(4))


def test_initialize_identity_behavior_blocks():
    part = LatentPartition(1, 2, 1)
    W = LoadingsMatrix.initialize(part, part.n_behavior, 5, torch.Generator().manual_seed(0), d_B=np.ones(5))
    np.testing.assert_array_equal(W.behavior_weights().detach().numpy(), np.eye(3))
    np.testing.assert_array_equal(W.d_B.detach().numpy(), np.ones(5))


def test_time_domain_shape_checks():
    basis = build_fourier_basis(8, 5)
    with pytest.raises(ShapeError):
        to_time_domain(np.zeros((1, 4)), basis)
    with pytest.raises(ShapeError):
        to_frequency_domain(np.zeros((1, 7)), basis)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(3, 40), F=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_pruned_projection_is_idempotent(T, F, seed):
    F = min(F, T)
    basis = build_fourier_basis(T, F)
    z = np.random.default_rng(seed).standard_normal((1, T))
    once = to_time_domain(to_frequency_domain(z, basis), basis)
    twice = to_time_domain(to_frequency_domain(once, basis), basis)
    np.testing.assert_allclose(once.numpy(), twice.numpy(), atol=1e-10)
    assert float(once.norm()) <= float(np.linalg.norm(z)) + 1e-10


@settings(max_examples=30, deadline=None)
@given(p=st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)), seed=st.integers(0, 10_000))
def test_mix_latents_linear_in_latents(p, seed):
    if sum(p) == 0:
        return
    part = LatentPartition(*p)
    rng = np.random.default_rng(seed)
    W = random_loadings(rng, part, 2, 3)
    z1, z2 = rng.standard_normal((2, part.P, 4))
    a1, b1 = mix_latents(z1, W, part)
    a2, b2 = mix_latents(z2, W, part)
    a12, b12 = mix_latents(z1 + z2, W, part)
    np.testing.assert_allclose((a12 - a1 - a2 + W.d_A[:, None]).detach().numpy(), 0, atol=1e-10)
    np.testing.assert_allclose((b12 - b1 - b2 + W.d_B[:, None]).detach().numpy(), 0, atol=1e-10)
