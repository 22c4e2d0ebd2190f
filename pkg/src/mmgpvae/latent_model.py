"""Latent partition and the block loadings that produce modality embeddings."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import ShapeError
from .fourier_gp import DTYPE, as_tensor


@dataclass(frozen=True)
class LatentPartition:
    """Counts of behavior-only, shared and neural-only latents.

    Latent rows are always ordered ``[z_A, z_S, z_B]``.
    """

    p_a: int
    p_s: int
    p_b: int

    def __post_init__(self):
        if min(self.p_a, self.p_s, self.p_b) < 0 or self.P < 1:
            raise ShapeError(f"invalid partition {self}")

    @property
    def P(self):
        return self.p_a + self.p_s + self.p_b

    @property
    def a(self):
        return slice(0, self.p_a)

    @property
    def s(self):
        return slice(self.p_a, self.p_a + self.p_s)

    @property
    def b(self):
        return slice(self.p_a + self.p_s, self.P)

    @property
    def behavior_rows(self):
        """Rows read by the behavior embedding: z_A then z_S."""
        return slice(0, self.p_a + self.p_s)

    @property
    def neural_rows(self):
        """Rows read by the neural embedding: z_S then z_B."""
        return slice(self.p_a, self.P)

    @property
    def n_behavior(self):
        return self.p_a + self.p_s

    @property
    def n_neural(self):
        return self.p_s + self.p_b

    def block_names(self):
        return [name for name, n in (("a", self.p_a), ("s", self.p_s), ("b", self.p_b)) if n]


class LoadingsMatrix(nn.Module):
    """Block loadings ``[[W_A, W_S1, 0], [0, W_S2, W_B]]`` plus offsets.

    The zero blocks are not stored, so the behavior embedding can never read
    z_B and the neural embedding can never read z_A.
    """

    def __init__(self, W_A, W_S1, W_S2, W_B, d_A, d_B):
        super().__init__()
        self.W_A = nn.Parameter(as_tensor(W_A).clone())
        self.W_S1 = nn.Parameter(as_tensor(W_S1).clone())
        self.W_S2 = nn.Parameter(as_tensor(W_S2).clone())
        self.W_B = nn.Parameter(as_tensor(W_B).clone())
        self.d_A = nn.Parameter(as_tensor(d_A).clone())
        self.d_B = nn.Parameter(as_tensor(d_B).clone())
        m_emb, n = self.d_A.shape[0], self.d_B.shape[0]
        if self.W_A.shape[0] != m_emb or self.W_S1.shape[0] != m_emb:
            raise ShapeError("behavior loadings rows must match d_A")
        if self.W_S2.shape[0] != n or self.W_B.shape[0] != n:
            raise ShapeError("neural loadings rows must match d_B")
        if self.W_S1.shape[1] != self.W_S2.shape[1]:
            raise ShapeError("W_S1 and W_S2 must read the same number of shared latents")

    @classmethod
    def initialize(cls, part, m_emb, n_neurons, generator=None, d_B=None):
        """Identity-sized behavior blocks when possible, small random neural blocks."""
        scale = 0.1 / np.sqrt(part.P)

        def randn(*shape):
            return scale * torch.randn(*shape, generator=generator, dtype=DTYPE)

        if m_emb == part.n_behavior:
            eye = torch.eye(m_emb, dtype=DTYPE)
            W_A, W_S1 = eye[:, : part.p_a], eye[:, part.p_a :]
        else:
            W_A, W_S1 = randn(m_emb, part.p_a), randn(m_emb, part.p_s)
        W_S2, W_B = randn(n_neurons, part.p_s), randn(n_neurons, part.p_b)
        d_A = torch.zeros(m_emb, dtype=DTYPE)
        d_B = torch.zeros(n_neurons, dtype=DTYPE) if d_B is None else as_tensor(d_B)
        return cls(W_A, W_S1, W_S2, W_B, d_A, d_B)

    @property
    def m_emb(self):
        return self.d_A.shape[0]

    @property
    def n_neurons(self):
        return self.d_B.shape[0]

    def behavior_weights(self):
        return torch.cat([self.W_A, self.W_S1], dim=1)

    def neural_weights(self):
        return torch.cat([self.W_S2, self.W_B], dim=1)


def to_time_domain(ztilde, basis):
    z = as_tensor(ztilde)
    if z.shape[-1] != basis.F:
        raise ShapeError(f"expected {basis.F} Fourier coefficients, got {z.shape[-1]}")
    return z @ basis.B


def to_frequency_domain(z, basis):
    z = as_tensor(z)
    if z.shape[-1] != basis.T:
        raise ShapeError(f"expected {basis.T} time bins, got {z.shape[-1]}")
    return z @ basis.B.T


def mix_latents(z, W, part):
    """Embeddings ``(x_A, x_B)`` for time-domain latents ``z`` of shape (..., P, T)."""
    z = as_tensor(z)
    if z.shape[-2] != part.P:
        raise ShapeError(f"expected {part.P} latent rows, got {z.shape[-2]}")
    if W.W_A.shape[1] != part.p_a or W.W_S1.shape[1] != part.p_s or W.W_B.shape[1] != part.p_b:
        raise ShapeError("loadings do not match the latent partition")
    x_A = W.behavior_weights() @ z[..., part.behavior_rows, :] + W.d_A[:, None]
    x_B = W.neural_weights() @ z[..., part.neural_rows, :] + W.d_B[:, None]
    return x_A, x_B
