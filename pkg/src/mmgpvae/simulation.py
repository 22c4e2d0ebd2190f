"""Synthetic paired data: a rotating/scaling glyph movie and Poisson spike counts.

Three GP latents per trial drive the data. ``z_s`` sets the glyph angle and
enters every neuron's log-rate, ``z_a`` sets the glyph scale only, and
``z_b`` enters the log-rates only.
"""
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.ndimage import map_coordinates

from . import persistence
from .config import checked_fields
from .exceptions import ConfigError, NumericDomainError
from .fourier_gp import KernelParams

LATENTS = ("z_a", "z_s", "z_b")


@dataclass
class SimConfig:
    trials: int = 300
    T: int = 60
    side: int = 28
    neurons: int = 100
    rho: float = 1.0
    ell: float = 30.0
    alpha: float = 1e-2
    angle_range: list = field(default_factory=lambda: [-90.0, 90.0])
    scale_range: list = field(default_factory=lambda: [0.6, 1.4])
    vary_scale: bool = True
    loading_scale: float = 0.5
    base_log_rate: float = 0.0
    offset_spread: float = 0.3
    pixel_noise: float = 0.0
    template: str | None = None
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.trials < 2 or self.neurons < 1 or self.side < 2:
            raise ConfigError("simulation: trials >= 2, neurons >= 1 and side >= 2 required")
        if self.T < 3:
            raise ConfigError(f"simulation.T: need at least 3 time bins (F >= 3 required), got {self.T}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"simulation.train_fraction: must lie in (0, 1), got {self.train_fraction}")
        for name in ("angle_range", "scale_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"simulation.{name}: empty range [{lo}, {hi}]")
        if self.scale_range[0] <= 0:
            raise ConfigError("simulation.scale_range: scales must be positive")
        KernelParams(self.rho, self.ell, self.alpha)

    @classmethod
    def from_dict(cls, d):
        return cls(**checked_fields(cls, d, "simulation"))

    def to_dict(self):
        return asdict(self)


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def load_template(path=None, side=28):
    """Glyph raster: ``side`` lines of ``side`` whitespace-separated floats in [0, 1]."""
    try:
        if path is None:
            text = resources.files("mmgpvae").joinpath("templates/digit3.txt").read_text()
            src = "bundled digit3 template"
        else:
            text = Path(path).read_text()
            src = str(path)
    except OSError as e:
        raise FileNotFoundError(f"cannot read template {path}: {e}") from e
    try:
        img = np.array([[float(v) for v in line.split()] for line in text.strip().splitlines()])
    except ValueError as e:
        raise ValueError(f"{src}: template must contain only numbers ({e})") from e
    if img.shape != (side, side):
        raise ValueError(f"{src}: template must be {side}x{side}, got {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError(f"{src}: template values must lie in [0, 1]")
    return img


def sample_gp_trajectories(cfg):
    """Independent draws from N(0, K + alpha I) for each latent and trial.

    Returns a dict of (trials, T) arrays keyed by ``z_a``, ``z_s``, ``z_b``.
    Trial ``k`` uses its own RNG stream derived from the seed.
    """
    t = np.arange(cfg.T)
    K = cfg.rho * np.exp(-0.5 * (t[:, None] - t[None, :]) ** 2 / cfg.ell**2) + cfg.alpha * np.eye(cfg.T)
    try:
        L = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError as e:
        raise NumericDomainError(f"GP covariance not positive definite; raise alpha (now {cfg.alpha})") from e
    eps = np.stack([_rng(cfg.seed, 1, k).standard_normal((len(LATENTS), cfg.T)) for k in range(cfg.trials)])
    z = eps @ L.T  # (trials, 3, T)
    return {name: z[:, i, :].copy() for i, name in enumerate(LATENTS)}


def affine_to_range(z, lo, hi, bounds=None):
    """Map ``z`` linearly so that its min/max over the array land on ``lo``/``hi``."""
    zmin, zmax = (float(np.min(z)), float(np.max(z))) if bounds is None else bounds
    if zmax == zmin:
        return np.full_like(np.asarray(z, dtype=float), 0.5 * (lo + hi))
    return lo + (np.asarray(z) - zmin) / (zmax - zmin) * (hi - lo)


def transform_frames(template, angles_deg, scales):
    """Rotate (counterclockwise, degrees) and scale the template about the frame center.

    ``angles_deg`` and ``scales`` share a shape S; returns S + (side*side,)
    flattened row-major frames, bilinearly resampled with zero fill.
    """
    side = template.shape[0]
    angles = np.deg2rad(np.asarray(angles_deg, dtype=float))
    scales = np.asarray(scales, dtype=float)
    shape = angles.shape
    th, sc = angles.reshape(-1, 1, 1), scales.reshape(-1, 1, 1)
    c0 = (side - 1) / 2.0
    r, c = np.mgrid[0:side, 0:side].astype(float)
    x, y = c - c0, c0 - r  # y points up
    cos, sin = np.cos(th), np.sin(th)
    src_x = (cos * x + sin * y) / sc
    src_y = (-sin * x + cos * y) / sc
    coords = np.stack([c0 - src_y, c0 + src_x]).reshape(2, -1)
    out = map_coordinates(template, coords, order=1, mode="constant", cval=0.0)
    return np.clip(out.reshape(*shape, side * side), 0.0, 1.0)


def render_frames(z_s, z_a, cfg, template=None, bounds=None):
    """Frames (trials, side*side, T) with angle from ``z_s`` and scale from ``z_a``.

    ``bounds`` optionally fixes the ``(min, max)`` of each latent used by the
    affine maps, as ``{"z_s": (lo, hi), "z_a": (lo, hi)}``.
    """
    if template is None:
        template = load_template(cfg.template, cfg.side)
    bounds = bounds or {}
    angles = affine_to_range(z_s, *cfg.angle_range, bounds.get("z_s"))
    if cfg.vary_scale:
        scales = affine_to_range(z_a, *cfg.scale_range, bounds.get("z_a"))
    else:
        scales = np.ones_like(np.asarray(angles))
    frames = transform_frames(template, angles, scales)  # (..., T, M)
    return np.swapaxes(frames, -1, -2)


def make_loadings(cfg):
    rng = _rng(cfg.seed, 2)
    W_s2 = cfg.loading_scale * rng.standard_normal(cfg.neurons)
    W_b = cfg.loading_scale * rng.standard_normal(cfg.neurons)
    d = cfg.base_log_rate + cfg.offset_spread * rng.standard_normal(cfg.neurons)
    return {"W_s2": W_s2, "W_b": W_b, "d": d}


def log_rates(z_s, z_b, loadings):
    return (
        loadings["W_s2"][None, :, None] * z_s[:, None, :]
        + loadings["W_b"][None, :, None] * z_b[:, None, :]
        + loadings["d"][None, :, None]
    )


def sample_spikes(z_s, z_b, loadings, seed):
    """Poisson counts (trials, N, T) at rates exp(W_s2 z_s + W_b z_b + d)."""
    rates = np.exp(log_rates(np.atleast_2d(z_s), np.atleast_2d(z_b), loadings))
    counts = np.stack([_rng(seed, 3, k).poisson(rates[k]) for k in range(rates.shape[0])])
    return counts.astype(np.float64)


def train_test_split(n, train_fraction, seed):
    perm = _rng(seed, 4).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def simulate(cfg):
    """Full synthetic dataset with ground truth, reproducible from ``cfg`` alone."""
    z = sample_gp_trajectories(cfg)
    template = load_template(cfg.template, cfg.side)
    clean = render_frames(z["z_s"], z["z_a"], cfg, template)
    Y_A = clean
    if cfg.pixel_noise > 0:
        Y_A = clean + cfg.pixel_noise * _rng(cfg.seed, 5).standard_normal(clean.shape)
    loadings = make_loadings(cfg)
    rates = np.exp(log_rates(z["z_s"], z["z_b"], loadings))
    Y_B = sample_spikes(z["z_s"], z["z_b"], loadings, cfg.seed)
    train_idx, test_idx = train_test_split(cfg.trials, cfg.train_fraction, cfg.seed)
    truth = {**z, **loadings, "rates": rates}
    if cfg.pixel_noise > 0:
        truth["images_clean"] = clean
    return persistence.Dataset(
        Y_A=Y_A, Y_B=Y_B, train_idx=train_idx, test_idx=test_idx, truth=truth,
        meta={"seed": cfg.seed, "generator": cfg.to_dict()},
    )


def write_dataset(path, ds):
    return persistence.write_dataset(path, ds)


def shared_latent_sanity(ds):
    """|corr| of z_s and of z_a with the first principal trajectory of log rates."""
    lr = np.log(ds.truth["rates"])  # (K, N, T)
    X = np.moveaxis(lr, 1, 0).reshape(lr.shape[1], -1)
    X = X - X.mean(axis=1, keepdims=True)
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    pc = vt[0]
    corr = {k: abs(np.corrcoef(pc, ds.truth[k].ravel())[0, 1]) for k in ("z_s", "z_a")}
    return corr["z_s"], corr["z_a"]
