"""ELBO assembly, training loop, ablation modes and finite-difference checks.

The full model and its ablations share one class. Fourier modes encode each
trial into a mean-field posterior over pruned Fourier coefficients; the two
time-domain baselines (a standard VAE and a GP-VAE with a dense time-domain
prior) keep a per-timepoint mean-field posterior instead.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .encoder import EncoderStack, VariationalPosterior, positive, sample_posterior
from .exceptions import DivergenceError, ShapeError
from .fourier_gp import (
    DTYPE,
    LOG_2PI,
    Spectrum,
    as_tensor,
    build_fourier_basis,
    gaussian_entropy,
    gp_prior_expectation,
    rbf_spectrum,
)
from .latent_model import LoadingsMatrix, mix_latents, to_time_domain
from .likelihoods import (
    BehaviorDecoder,
    behavior_loglik,
    gaussian_neural_loglik,
    log_factorial,
    mlp,
    poisson_expectation_closed_form,
)

__all__ = ["ModelConfig", "MMGPVAE", "TrainState", "elbo", "train", "grad_check", "derive_seed"]

log = logging.getLogger(__name__)

TERMS = ("behavior", "neural", "prior", "entropy")


def derive_seed(*keys):
    """Deterministic 63-bit seed from a master seed and stream labels."""
    words = [k if isinstance(k, int) else int.from_bytes(str(k).encode(), "little") % (2**32) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class TimeEncoder(nn.Module):
    """Per-timepoint encoder for the time-domain baselines."""

    def __init__(self, m_obs, P, hidden):
        super().__init__()
        self.net = mlp([m_obs, *hidden, 2 * P])
        with torch.no_grad():
            self.net[-1].bias[P:].fill_(-2.0)

    def forward(self, Y_A, Y_B=None):
        out = self.net(as_tensor(Y_A).transpose(-1, -2)).transpose(-1, -2)
        P = out.shape[-2] // 2
        return VariationalPosterior(out[..., :P, :], positive(out[..., P:, :]))


class MMGPVAE(nn.Module):
    """Multi-modal GP-VAE and its single-modality ablations.

    Parameters
    ----------
    cfg : ModelConfig
    m_obs : int
        Behavior observation dimension (ignored in ``gpfa_only``).
    n_obs : int
        Number of neurons (ignored in behavior-only modes).
    d_B : array-like, optional
        Initial neural offsets, usually the mean log-rate of the data.
    """

    def __init__(self, cfg, m_obs, n_obs, d_B=None):
        super().__init__()
        self.cfg = cfg
        self.part = part = cfg.partition()
        self.m_obs = m_obs if cfg.uses_behavior else 0
        self.n_obs = n_obs if cfg.uses_neural else 0
        d_B = d_B if cfg.uses_neural else None
        T = cfg.T
        if cfg.fourier:
            self.basis = build_fourier_basis(T, cfg.n_freq())
        else:
            self.basis = build_fourier_basis(T, T)
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "init"))
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(cfg.seed, "init-nets"))
            if cfg.fourier:
                self.encoder = EncoderStack(
                    part, T, self.basis.F, self.m_obs, self.n_obs,
                    cfg.enc_hidden_a, cfg.enc_hidden_b, basis=self.basis,
                )
            else:
                self.encoder = TimeEncoder(self.m_obs, part.P, cfg.enc_hidden_a)
            m_emb = (cfg.m_emb or part.n_behavior) if cfg.uses_behavior else 0
            self.loadings = LoadingsMatrix.initialize(part, m_emb, self.n_obs, gen, d_B)
            self.decoder = None
            if cfg.uses_behavior:
                self.decoder = BehaviorDecoder(m_emb, self.m_obs, cfg.dec_hidden, cfg.sigma_y2_init)
        if cfg.mode != "vae_baseline":
            self.log_rho = nn.Parameter(torch.log(torch.tensor(cfg.per_latent(cfg.rho0), dtype=DTYPE)))
            self.log_ell = nn.Parameter(torch.log(torch.tensor(cfg.per_latent(cfg.ell0), dtype=DTYPE)))
        if cfg.uses_neural and cfg.neural_kind == "gaussian":
            self.log_sigma_n2 = nn.Parameter(torch.full((self.n_obs,), math.log(cfg.sigma_n2_init), dtype=DTYPE))

    @property
    def latent_shape(self):
        return (self.part.P, self.basis.F if self.cfg.fourier else self.cfg.T)

    def spectrum(self):
        return Spectrum(rbf_spectrum(torch.exp(self.log_rho), torch.exp(self.log_ell), self.basis), self.cfg.alpha)

    def posterior(self, Y_A=None, Y_B=None):
        Y_A = as_tensor(Y_A) if (Y_A is not None and self.cfg.uses_behavior) else None
        Y_B = as_tensor(Y_B) if (Y_B is not None and self.cfg.uses_neural) else None
        return self.encoder(Y_A, Y_B)

    def to_time(self, latents):
        return to_time_domain(latents, self.basis) if self.cfg.fourier else latents

    def prior_expectation(self, post):
        cfg = self.cfg
        if cfg.mode == "vae_baseline":
            return -0.5 * (LOG_2PI + post.mu**2 + post.sigma2).sum(dim=(-2, -1))
        if cfg.fourier:
            return gp_prior_expectation(post, self.spectrum())
        return timedomain_prior_expectation(post, torch.exp(self.log_rho), torch.exp(self.log_ell), cfg.alpha)

    def elbo_terms(self, Y_A, Y_B, noise, log_fact=None):
        """Per-trial ELBO components.

        ``noise`` has shape (S, ..., P, F) with S reparameterization samples;
        the sampled terms are averaged over S.
        """
        cfg, part = self.cfg, self.part
        post = self.posterior(Y_A, Y_B)
        noise = as_tensor(noise)
        if noise.shape[1:] != post.mu.shape:
            raise ShapeError(f"noise {tuple(noise.shape)} vs posterior {tuple(post.mu.shape)}")
        zeros = torch.zeros(post.mu.shape[:-2], dtype=DTYPE)
        terms = {"behavior": zeros, "neural": zeros}
        sampled_neural = cfg.uses_neural and cfg.neural_kind == "gaussian"
        if cfg.uses_behavior or sampled_neural:
            beh, neu = 0.0, 0.0
            for eps in noise:
                z = self.to_time(sample_posterior(post, eps))
                x_A, x_B = mix_latents(z, self.loadings, part)
                if cfg.uses_behavior:
                    beh = beh + behavior_loglik(Y_A, x_A, self.decoder)
                if sampled_neural:
                    neu = neu + gaussian_neural_loglik(Y_B, x_B, torch.exp(self.log_sigma_n2))
            S = noise.shape[0]
            if cfg.uses_behavior:
                terms["behavior"] = beh / S
            if sampled_neural:
                terms["neural"] = neu / S
        if cfg.uses_neural and cfg.neural_kind == "poisson":
            terms["neural"] = poisson_expectation_closed_form(Y_B, post, self.loadings, part, self.basis, log_fact)
        terms["prior"] = self.prior_expectation(post)
        terms["entropy"] = gaussian_entropy(post)
        return terms

    def draw_noise(self, batch_shape, generator):
        shape = (self.cfg.n_samples, *batch_shape, *self.latent_shape)
        return torch.randn(shape, generator=generator, dtype=DTYPE)

    @torch.no_grad()
    def reconstruct(self, Y_A=None, Y_B=None):
        """Posterior-mean latents (time domain) and decoded means for both modalities."""
        post = self.posterior(Y_A, Y_B)
        z = self.to_time(post.mu)
        x_A, x_B = mix_latents(z, self.loadings, self.part)
        out = {"z": z, "x_A": x_A, "x_B": x_B}
        if self.cfg.uses_behavior:
            out["Y_A"] = self.decoder(x_A)
        if self.cfg.uses_neural:
            out["rates"] = torch.exp(x_B) if self.cfg.neural_kind == "poisson" else x_B
        return out


def timedomain_prior_expectation(post, rho, ell, alpha):
    """E_q[log N(z_p | 0, K_p + alpha I)] with K_p a dense RBF Gram matrix."""
    T = post.mu.shape[-1]
    t = torch.arange(T, dtype=DTYPE)
    d2 = (t[:, None] - t[None, :]) ** 2
    K = rho[:, None, None] * torch.exp(-0.5 * d2 / ell[:, None, None] ** 2) + alpha * torch.eye(T, dtype=DTYPE)
    L = torch.linalg.cholesky(K)  # (P, T, T)
    logdet = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)  # (P,)
    Kinv = torch.cholesky_inverse(L)
    diag_inv = torch.diagonal(Kinv, dim1=-2, dim2=-1)  # (P, T)
    mu = post.mu
    quad = torch.einsum("...pt,pts,...ps->...p", mu, Kinv, mu)
    tr = (diag_inv * post.sigma2).sum(-1)
    return -0.5 * (T * LOG_2PI + logdet + tr + quad).sum(-1)


def elbo(model, Y_A, Y_B, noise, log_fact=None):
    """Total ELBO summed over the trials of a batch."""
    terms = model.elbo_terms(Y_A, Y_B, noise, log_fact)
    return sum(t.sum() for t in terms.values())


@dataclass
class TrainState:
    model: MMGPVAE
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    trace: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def cfg(self):
        return self.model.cfg


def training_arrays(data, cfg, indices=None):
    """Pull (Y_A, Y_B) tensors for the mode from a dataset-like object."""
    idx = data.train_idx if indices is None else indices
    Y_A = as_tensor(data.Y_A[idx]) if cfg.uses_behavior else None
    Y_B = as_tensor(data.Y_B[idx]) if cfg.uses_neural else None
    return Y_A, Y_B


def initial_offsets(Y_B, kind):
    if Y_B is None:
        return None
    mean = Y_B.mean(dim=(0, 2))
    return torch.log(mean + 1e-3) if kind == "poisson" else mean


def init_state(data, cfg):
    Y_A, Y_B = training_arrays(data, cfg)
    if cfg.uses_behavior and data.Y_A is None:
        raise ShapeError(f"mode {cfg.mode} needs behavior data")
    if cfg.uses_neural and data.Y_B is None:
        raise ShapeError(f"mode {cfg.mode} needs neural data")
    if data.T != cfg.T:
        raise ShapeError(f"dataset has T={data.T} bins but config says T={cfg.T}")
    m_obs = data.Y_A.shape[1] if data.Y_A is not None else 0
    n_obs = data.Y_B.shape[1] if data.Y_B is not None else 0
    model = MMGPVAE(cfg, m_obs, n_obs, d_B=initial_offsets(Y_B, cfg.neural_kind))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    meta = {}
    if not cfg.uses_behavior and data.Y_A is not None:
        meta["ignored_modality"] = "behavior"
    if not cfg.uses_neural and data.Y_B is not None:
        meta["ignored_modality"] = "neural"
    return TrainState(model=model, optimizer=opt, meta=meta)


def _check_finite(terms, epoch):
    for name, val in terms.items():
        if not bool(torch.isfinite(val).all()):
            raise DivergenceError(f"non-finite {name} term at epoch {epoch}", term=name, epoch=epoch)


def train(data, cfg=None, state=None, epochs=None, progress=None):
    """Fit by ADAM on minibatches of training trials.

    Resumes from ``state`` when given. Each epoch draws its trial order and
    reparameterization noise from a generator seeded by ``(seed, epoch)``,
    so resumed and uninterrupted runs see identical streams.
    """
    if state is None:
        state = init_state(data, cfg)
    cfg = state.cfg
    epochs = cfg.epochs if epochs is None else epochs
    model, opt = state.model, state.optimizer
    Y_A, Y_B = training_arrays(data, cfg)
    n = (Y_A if Y_A is not None else Y_B).shape[0]
    log_fact = log_factorial(Y_B) if (Y_B is not None and cfg.neural_kind == "poisson") else None
    for _ in range(epochs):
        epoch = state.epoch
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "epoch", epoch))
        order = torch.randperm(n, generator=gen)
        sums = dict.fromkeys(TERMS, 0.0)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            ya = Y_A[idx] if Y_A is not None else None
            yb = Y_B[idx] if Y_B is not None else None
            lf = log_fact[idx] if log_fact is not None else None
            noise = model.draw_noise((len(idx),), gen)
            terms = model.elbo_terms(ya, yb, noise, lf)
            _check_finite(terms, epoch)
            total = sum(t.sum() for t in terms.values())
            opt.zero_grad()
            (-total / len(idx)).backward()
            opt.step()
            for k, v in terms.items():
                sums[k] += float(v.detach().sum())
        for name, p in model.named_parameters():
            if not bool(torch.isfinite(p).all()):
                raise DivergenceError(f"parameter {name} became non-finite at epoch {epoch}", term=name, epoch=epoch)
        row = {"epoch": epoch, "elbo": sum(sums.values()), **sums}
        state.trace.append(row)
        state.epoch += 1
        if progress is not None:
            progress(row)
    return state


@torch.no_grad()
def dataset_elbo(model, Y_A, Y_B, seed=0):
    """ELBO of every trial with fixed noise; returns per-term sums."""
    gen = torch.Generator().manual_seed(derive_seed(seed, "eval-elbo"))
    Y_any = Y_A if Y_A is not None else Y_B
    noise = model.draw_noise((Y_any.shape[0],), gen)
    terms = model.elbo_terms(Y_A, Y_B, noise)
    out = {k: float(v.sum()) for k, v in terms.items()}
    out["elbo"] = sum(out.values())
    return out


@dataclass
class GradCheckReport:
    errors: dict
    tol: float

    @property
    def failing(self):
        return [k for k, v in self.errors.items() if not v <= self.tol]

    @property
    def passed(self):
        return not self.failing

    def __str__(self):
        lines = [f"{k:40s} {v:.3e} {'ok' if v <= self.tol else 'FAIL'}" for k, v in self.errors.items()]
        return "\n".join(lines)


def grad_check(model, Y_A, Y_B, noise, step=1e-5, tol=1e-4):
    """Central finite differences of the ELBO against autograd, per parameter.

    Relative error is ``|g - g_fd| / max(|g|, |g_fd|)`` in the Euclidean norm
    over each parameter tensor; tensors whose gradients are both below 1e-10
    count as exact.
    """
    Y_A = as_tensor(Y_A) if Y_A is not None else None
    Y_B = as_tensor(Y_B) if Y_B is not None else None
    noise = as_tensor(noise)

    def f():
        return elbo(model, Y_A, Y_B, noise)

    model.zero_grad()
    f().backward()
    errors = {}
    for name, p in model.named_parameters():
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        g_fd = torch.zeros_like(p)
        with torch.no_grad():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                g_fd.view(-1)[i] = (up - down) / (2 * step)
        scale = max(float(g.norm()), float(g_fd.norm()))
        errors[name] = 0.0 if scale < 1e-10 else float((g - g_fd).norm()) / scale
    model.zero_grad()
    return GradCheckReport(errors=errors, tol=tol)
