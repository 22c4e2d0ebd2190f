"""GP priors in a real Fourier basis.

Latents are represented by their coefficients in a real orthonormal DFT
basis (DC row, then cosine/sine pairs of increasing frequency). An RBF kernel
periodized over the trial length is circulant, so its Gram matrix is exactly
diagonal in this basis and the prior factorizes over coefficients.
"""
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import NumericDomainError, ParameterDomainError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
DTYPE = torch.float64


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass
class KernelParams:
    """RBF hyperparameters for one latent.

    ``rho`` is the marginal variance, ``ell`` the length scale in time bins,
    and ``alpha`` a fixed diagonal jitter added to the prior variance.
    """

    rho: float
    ell: float
    alpha: float = 1e-2

    def __post_init__(self):
        if not self.rho > 0:
            raise ParameterDomainError(f"rho must be positive, got {self.rho}")
        if not self.ell > 0:
            raise ParameterDomainError(f"ell must be positive, got {self.ell}")
        if not self.alpha >= 0:
            raise ParameterDomainError(f"alpha must be nonnegative, got {self.alpha}")


@dataclass
class FourierBasis:
    T: int
    F: int
    B: torch.Tensor  # (F, T), orthonormal rows
    freqs: np.ndarray  # integer frequency of each row
    kinds: tuple = field(default=())  # 'dc' | 'cos' | 'sin' | 'nyquist'

    def to_time(self, ztilde):
        return as_tensor(ztilde) @ self.B

    def to_frequency(self, z):
        return as_tensor(z) @ self.B.T


@dataclass
class Spectrum:
    """Prior variances of Fourier coefficients, one row per latent.

    ``s`` has shape (P, F); the prior variance used in densities is
    ``s + alpha``.
    """

    s: torch.Tensor
    alpha: float

    @property
    def variance(self):
        return self.s + self.alpha


def _check_rbf(rho, ell):
    rho_t, ell_t = as_tensor(rho), as_tensor(ell)
    if bool((rho_t <= 0).any()) or bool((ell_t <= 0).any()):
        raise ParameterDomainError(f"RBF parameters must be positive (rho={rho}, ell={ell})")
    return rho_t, ell_t


def build_rbf_gram(params, T):
    """Dense T x T RBF Gram matrix without jitter."""
    if T < 1:
        raise ParameterDomainError(f"T must be >= 1, got {T}")
    rho, ell = _check_rbf(params.rho, params.ell)
    t = torch.arange(T, dtype=DTYPE)
    diff = t[:, None] - t[None, :]
    return rho * torch.exp(-0.5 * diff**2 / ell**2)


def build_fourier_basis(T, F=None):
    """First ``F`` rows of the real orthonormal DFT basis on ``T`` bins."""
    F = T if F is None else F
    if T < 1 or not 1 <= F <= T:
        raise ParameterDomainError(f"need 1 <= F <= T, got T={T}, F={F}")
    t = np.arange(T)
    rows, freqs, kinds = [np.full(T, 1.0 / math.sqrt(T))], [0], ["dc"]
    k = 1
    while len(rows) < F:
        if 2 * k == T:
            rows.append(np.cos(np.pi * t) / math.sqrt(T))
            freqs.append(k)
            kinds.append("nyquist")
        else:
            rows.append(math.sqrt(2.0 / T) * np.cos(2 * np.pi * k * t / T))
            freqs.append(k)
            kinds.append("cos")
            if len(rows) < F:
                rows.append(math.sqrt(2.0 / T) * np.sin(2 * np.pi * k * t / T))
                freqs.append(k)
                kinds.append("sin")
        k += 1
    B = torch.as_tensor(np.stack(rows), dtype=DTYPE)
    return FourierBasis(T=T, F=F, B=B, freqs=np.asarray(freqs), kinds=tuple(kinds))


def periodized_rbf_row(rho, ell, T):
    """First row of the T-periodic RBF kernel, ``sum_n k(tau + n T)``.

    ``rho`` and ``ell`` may be tensors of shape (P,); the result is (P, T).
    Image terms are kept out to eight length scales beyond one period.
    """
    rho, ell = _check_rbf(rho, ell)
    rho, ell = torch.atleast_1d(rho), torch.atleast_1d(ell)
    n_img = int(math.ceil(8.0 * float(ell.detach().max()) / T)) + 1
    shifts = torch.arange(-n_img, n_img + 1, dtype=DTYPE) * T
    lags = torch.arange(T, dtype=DTYPE)[None, :] + shifts[:, None]  # (images, T)
    r = torch.exp(-0.5 * lags[None] ** 2 / ell[:, None, None] ** 2).sum(dim=1)
    return rho[:, None] * r


def rbf_spectrum(rho, ell, basis):
    """Circulant eigenvalues of the periodized RBF kernel at the basis rows.

    Differentiable in ``rho`` and ``ell``; returns a (P, F) tensor clamped at
    zero from below.
    """
    T = basis.T
    c = periodized_rbf_row(rho, ell, T)
    tau = torch.arange(T, dtype=DTYPE)
    k = torch.as_tensor(basis.freqs, dtype=DTYPE)
    cosmat = torch.cos(2.0 * math.pi * tau[:, None] * k[None, :] / T)  # (T, F)
    return torch.clamp(c @ cosmat, min=0.0)


def kernel_spectrum(params, basis):
    """Spectrum for one ``KernelParams`` or a sequence of them (one per latent)."""
    plist = [params] if isinstance(params, KernelParams) else list(params)
    alphas = {p.alpha for p in plist}
    if len(alphas) != 1:
        raise ParameterDomainError("all latents must share one jitter alpha")
    rho = torch.tensor([p.rho for p in plist], dtype=DTYPE)
    ell = torch.tensor([p.ell for p in plist], dtype=DTYPE)
    return Spectrum(s=rbf_spectrum(rho, ell, basis), alpha=alphas.pop())


def _prior_variance(spectra, shape):
    if isinstance(spectra, Spectrum):
        var = spectra.variance
    else:
        var = torch.cat([sp.variance for sp in spectra], dim=0)
    if var.shape[-2:] != tuple(shape[-2:]):
        raise ShapeError(f"spectrum shape {tuple(var.shape)} does not match latents {tuple(shape)}")
    if bool((var <= 0).any()):
        raise NumericDomainError("prior variance s + alpha must be positive")
    return var


def gp_prior_logdensity(ztilde, spectra):
    """log N(ztilde | 0, diag(s + alpha)), summed over latents and coefficients.

    Leading batch dimensions of ``ztilde`` are preserved.
    """
    z = as_tensor(ztilde)
    var = _prior_variance(spectra, z.shape)
    return -0.5 * (LOG_2PI + torch.log(var) + z**2 / var).sum(dim=(-2, -1))


def gp_prior_expectation(post, spectra):
    """Closed-form E_q[log p(ztilde)] under a mean-field Gaussian posterior."""
    mu, s2 = as_tensor(post.mu), as_tensor(post.sigma2)
    if bool((s2 < 0).any()):
        raise NumericDomainError("posterior variances must be nonnegative")
    var = _prior_variance(spectra, mu.shape)
    return -0.5 * (LOG_2PI + torch.log(var) + (s2 + mu**2) / var).sum(dim=(-2, -1))


def gaussian_entropy(post):
    s2 = as_tensor(post.sigma2)
    if bool((s2 <= 0).any()):
        raise NumericDomainError("posterior variances must be positive for the entropy")
    return 0.5 * (LOG_2PI + 1.0 + torch.log(s2)).sum(dim=(-2, -1))


def prune_count(ell_min, T, mass=0.999):
    """Number of Fourier rows retaining ``mass`` of an RBF spectrum at ``ell_min``.

    Rows are taken in basis order and a cosine row always brings its sine
    partner along. The result is clamped to ``[3, T]``.
    """
    if not ell_min > 0:
        raise ParameterDomainError(f"ell_min must be positive, got {ell_min}")
    if not 0 < mass <= 1:
        raise ParameterDomainError(f"mass must lie in (0, 1], got {mass}")
    if mass >= 1.0:
        return T
    basis = build_fourier_basis(T, T)
    s = rbf_spectrum(1.0, ell_min, basis)[0].numpy()
    cum = np.cumsum(s)
    F = int(np.searchsorted(cum, mass * cum[-1]) + 1)
    if F < T and basis.kinds[F - 1] == "cos":
        F += 1
    return int(min(max(F, 3), T))
