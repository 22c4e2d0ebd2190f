"""Amortized inference: per-timepoint encoders and time-to-frequency maps."""
from dataclasses import dataclass

import torch
import torch.nn.functional as nnf
from torch import nn

from .exceptions import NumericDomainError, ShapeError
from .fourier_gp import DTYPE, as_tensor
from .likelihoods import mlp

VARIANCE_FLOOR = 1e-6


@dataclass
class VariationalPosterior:
    """Mean-field Gaussian over latent coefficients.

    Both arrays have shape (..., P, F); there is no off-diagonal state.
    """

    mu: torch.Tensor
    sigma2: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma2.shape:
            raise ShapeError("mu and sigma2 must have the same shape")

    def detach(self):
        return VariationalPosterior(self.mu.detach(), self.sigma2.detach())

    def __getitem__(self, idx):
        return VariationalPosterior(self.mu[idx], self.sigma2[idx])


def positive(pre):
    return nnf.softplus(pre) + VARIANCE_FLOOR


class EncoderStack(nn.Module):
    """Per-modality encoders feeding shared linear maps from T bins to F coefficients.

    Each per-timepoint network emits two heads of width ``n_rows``: one
    read by ``l_mu`` and one by ``l_sigma``. Either network may be ``None``
    when its modality is absent.
    """

    def __init__(self, part, T, F, m_obs=None, n_obs=None, hidden_a=(128, 32), hidden_b=(64, 32), basis=None):
        super().__init__()
        self.part = part
        self.enc_A = None
        self.enc_B = None
        if m_obs and part.n_behavior:
            self.enc_A = mlp([m_obs, *hidden_a, 2 * part.n_behavior])
        if n_obs and part.n_neural:
            self.enc_B = mlp([n_obs, *hidden_b, 2 * part.n_neural])
        self.l_mu = nn.Linear(T, F, dtype=DTYPE)
        self.l_sigma = nn.Linear(T, F, dtype=DTYPE)
        with torch.no_grad():
            if basis is not None:
                # start the mean map at the orthogonal projection onto the basis
                self.l_mu.weight.copy_(basis.B)
                self.l_mu.bias.zero_()
            self.l_sigma.weight.mul_(0.1)
            self.l_sigma.bias.fill_(-2.0)

    @property
    def T(self):
        return self.l_mu.in_features

    @staticmethod
    def _heads(net, Y):
        out = net(Y.transpose(-1, -2)).transpose(-1, -2)  # (..., 2n, T)
        n = out.shape[-2] // 2
        return out[..., :n, :], out[..., n:, :]

    def forward(self, Y_A=None, Y_B=None):
        part = self.part
        mu_rows = [None] * part.P
        pre_rows = [None] * part.P
        for net, Y, rows in ((self.enc_A, Y_A, part.behavior_rows), (self.enc_B, Y_B, part.neural_rows)):
            if net is None:
                continue
            if Y is None:
                raise ShapeError("encoder needs data for every modality it was built with")
            Y = as_tensor(Y)
            if Y.shape[-1] != self.T:
                raise ShapeError(f"trained for T={self.T} bins, got {Y.shape[-1]}")
            h_mu, h_var = self._heads(net, Y)
            m, pre = self.l_mu(h_mu), self.l_sigma(h_var)
            for j, p in enumerate(range(rows.start, rows.stop)):
                mu_rows[p] = m[..., j, :] if mu_rows[p] is None else mu_rows[p] + m[..., j, :]
                pre_rows[p] = pre[..., j, :] if pre_rows[p] is None else pre_rows[p] + pre[..., j, :]
        if any(r is None for r in mu_rows):
            raise ShapeError("some latent rows are read by no encoder")
        mu = torch.stack(mu_rows, dim=-2)
        sigma2 = positive(torch.stack(pre_rows, dim=-2))
        return VariationalPosterior(mu, sigma2)


def encode_trial(Y_A, Y_B, stack, part=None):
    if part is not None and part != stack.part:
        raise ShapeError("partition does not match the encoder stack")
    return stack(Y_A, Y_B)


def sample_posterior(post, noise):
    """Reparameterized draw ``mu + sqrt(sigma2) * noise``."""
    noise = as_tensor(noise)
    if noise.shape != post.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} vs posterior {tuple(post.mu.shape)}")
    if bool((post.sigma2 < 0).any()):
        raise NumericDomainError("posterior variances must be nonnegative")
    return post.mu + torch.sqrt(post.sigma2) * noise
