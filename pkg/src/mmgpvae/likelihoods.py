"""Observation models for the behavior (network-decoded) and neural (linear) modalities."""
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import NumericDomainError, ShapeError
from .fourier_gp import DTYPE, LOG_2PI, as_tensor

# m + v/2 is capped here before exponentiation
LOG_RATE_CAP = 30.0


def mlp(sizes, final_activation=None):
    """Feed-forward stack with ELU between layers and a linear output."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(n_in, n_out, dtype=DTYPE))
        if i < len(sizes) - 2:
            layers.append(nn.ELU())
    if final_activation is not None:
        layers.append(final_activation)
    return nn.Sequential(*layers)


class BehaviorDecoder(nn.Module):
    """Network ``g`` mapping the behavior embedding to observation means.

    Parameters
    ----------
    m_emb : int
        Width of the behavior embedding x_A.
    m_obs : int
        Observation dimension M.
    hidden : sequence of int
        Hidden layer widths; empty gives a purely linear decoder.
    sigma_y2 : float
        Initial isotropic observation variance (learned in log space).
    """

    def __init__(self, m_emb, m_obs, hidden=(64, 256), sigma_y2=100.0):
        super().__init__()
        if not sigma_y2 > 0:
            raise NumericDomainError(f"sigma_y2 must be positive, got {sigma_y2}")
        self.net = mlp([m_emb, *hidden, m_obs])
        self.log_sigma_y2 = nn.Parameter(torch.tensor(math.log(sigma_y2), dtype=DTYPE))

    @property
    def sigma_y2(self):
        return torch.exp(self.log_sigma_y2)

    @property
    def m_obs(self):
        return self.net[-1].out_features

    def forward(self, x_A):
        # (..., M_emb, T) -> (..., M, T); the network acts on each time bin
        return self.net(x_A.transpose(-1, -2)).transpose(-1, -2)


@dataclass
class NeuralLikelihoodConfig:
    kind: str = "poisson"
    sigma_n2: float = 1.0

    def __post_init__(self):
        if self.kind not in ("poisson", "gaussian"):
            raise ValueError(f"unknown neural likelihood {self.kind!r}")
        if self.kind == "gaussian" and not np.all(np.asarray(self.sigma_n2) > 0):
            raise NumericDomainError("sigma_n2 must be positive")


def gaussian_loglik(y, mean, var):
    """Sum of elementwise log N(y | mean, var) over the last two axes."""
    var = as_tensor(var)
    if bool((var <= 0).any()):
        raise NumericDomainError("observation variance must be positive")
    r = as_tensor(y) - mean
    return -0.5 * (LOG_2PI + torch.log(var) + r**2 / var).sum(dim=(-2, -1))


def behavior_loglik(Y_A, x_A, dec):
    """sum_t log N(y_t | g(x_t), sigma_y^2 I) with full normalizers."""
    Y_A = as_tensor(Y_A)
    mean = dec(as_tensor(x_A))
    if mean.shape != Y_A.shape:
        raise ShapeError(f"decoder output {tuple(mean.shape)} vs observations {tuple(Y_A.shape)}")
    var = dec.sigma_y2
    if not var > 0:
        raise NumericDomainError("sigma_y2 must be positive")
    n = Y_A.shape[-1] * Y_A.shape[-2]
    sse = ((Y_A - mean) ** 2).sum(dim=(-2, -1))
    return -0.5 * (n * (LOG_2PI + torch.log(var)) + sse / var)


def _check_counts(Y):
    Y = as_tensor(Y)
    if bool((Y < 0).any()):
        raise ValueError("spike counts must be nonnegative")
    if bool((Y != torch.round(Y)).any()):
        raise ValueError("spike counts must be integers")
    return Y


def log_factorial(Y):
    return torch.lgamma(as_tensor(Y) + 1.0)


def poisson_loglik_sampled(Y_B, x_B):
    """Poisson log-likelihood with exponential link at a given log-rate x_B."""
    Y = _check_counts(Y_B)
    x = as_tensor(x_B)
    return (Y * x - torch.exp(x) - log_factorial(Y)).sum(dim=(-2, -1))


def neural_moments(post, W, part, basis):
    """Posterior mean and variance of the neural embedding.

    With x = W_n Z B + d and independent Gaussian coefficients,
    m = W_n mu B + d and v_{it} = sum_{p,k} W_n[i,p]^2 B[k,t]^2 sigma2[p,k].
    """
    mu = as_tensor(post.mu)[..., part.neural_rows, :]
    s2 = as_tensor(post.sigma2)[..., part.neural_rows, :]
    if mu.shape[-1] != basis.F:
        raise ShapeError(f"posterior has {mu.shape[-1]} coefficients, basis {basis.F}")
    if bool((s2 < 0).any()):
        raise NumericDomainError("posterior variances must be nonnegative")
    Wn = W.neural_weights()
    m = Wn @ mu @ basis.B + W.d_B[:, None]
    v = (Wn**2) @ s2 @ (basis.B**2)
    return m, v


def poisson_expectation_closed_form(Y_B, post, W, part, basis, log_fact=None):
    """E_q[log Poisson(Y_B | exp(x_B))] using the log-normal mean of the rate.

    ``log_fact`` may carry precomputed ``log y!`` values.
    """
    Y = _check_counts(Y_B)
    m, v = neural_moments(post, W, part, basis)
    if m.shape[-2:] != Y.shape[-2:]:
        raise ShapeError(f"embedding {tuple(m.shape)} vs counts {tuple(Y.shape)}")
    arg = m + 0.5 * v
    if bool((arg > LOG_RATE_CAP).any()):
        warnings.warn(f"log-rate moment exceeds {LOG_RATE_CAP}; clamping", RuntimeWarning)
        arg = torch.clamp(arg, max=LOG_RATE_CAP)
    lf = log_factorial(Y) if log_fact is None else log_fact
    return (Y * m - torch.exp(arg) - lf).sum(dim=(-2, -1))


def gaussian_neural_loglik(Y_B, x_B, sigma_n2):
    """Per-neuron Gaussian observation model for continuous neural traces."""
    if isinstance(sigma_n2, NeuralLikelihoodConfig):
        sigma_n2 = sigma_n2.sigma_n2
    x = as_tensor(x_B)
    var = as_tensor(sigma_n2)
    if var.ndim == 1:
        var = var[:, None]
    return gaussian_loglik(Y_B, x, var.expand(x.shape[-2:]))
