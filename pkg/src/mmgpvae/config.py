"""Model configuration, per-experiment presets, and strict dict parsing."""
import dataclasses
from dataclasses import dataclass, field

from .exceptions import ConfigError
from .fourier_gp import prune_count
from .latent_model import LatentPartition

MODES = ("multimodal", "gpvae_only", "gpfa_only", "vae_baseline", "timedomain_gpvae")
FOURIER_MODES = ("multimodal", "gpvae_only", "gpfa_only")
BEHAVIOR_MODES = ("multimodal", "gpvae_only", "vae_baseline", "timedomain_gpvae")
NEURAL_MODES = ("multimodal", "gpfa_only")

# (alpha, sigma_y2 init, pruning ell_min) per experiment
PRESETS = {
    "gpvae_sim": dict(alpha=1e-2, sigma_y2_init=1000.0, ell_min=10.0),
    "mmgpvae_sim": dict(alpha=1e-2, sigma_y2_init=100.0, ell_min=10.0),
    "mmgpvae_fly": dict(alpha=1e-3, sigma_y2_init=1e-6, ell_min=3.0, neural_kind="gaussian"),
    "mmgpvae_moth": dict(alpha=1e-4, sigma_y2_init=1.0, ell_min=16.0),
}


@dataclass
class ModelConfig:
    mode: str = "multimodal"
    p_a: int = 1
    p_s: int = 1
    p_b: int = 1
    T: int = 60
    F: int | None = None
    ell_min: float = 10.0
    prune_mass: float = 0.999
    rho0: float | list = 1.0
    ell0: float | list = 30.0
    alpha: float = 1e-2
    neural_kind: str = "poisson"
    sigma_n2_init: float = 1.0
    sigma_y2_init: float = 1.0
    m_emb: int | None = None
    enc_hidden_a: list = field(default_factory=lambda: [128, 32])
    enc_hidden_b: list = field(default_factory=lambda: [64, 32])
    dec_hidden: list = field(default_factory=lambda: [32, 128])
    learning_rate: float = 1e-3
    batch_size: int = 20
    epochs: int = 300
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown value {self.mode!r}; expected one of {MODES}")
        if self.neural_kind not in ("poisson", "gaussian"):
            raise ConfigError(f"neural_kind: expected 'poisson' or 'gaussian', got {self.neural_kind!r}")
        if self.T < 3:
            raise ConfigError(f"T: need at least 3 time bins (F >= 3 required), got {self.T}")
        if self.F is not None and not 3 <= self.F <= self.T:
            raise ConfigError(f"F: need 3 <= F <= T, got F={self.F}, T={self.T}")
        for name in ("p_a", "p_s", "p_b", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be nonnegative")
        if self.p_a + self.p_s + self.p_b < 1:
            raise ConfigError("partition: need at least one latent")
        for name in ("alpha",):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be nonnegative")
        for name in ("sigma_y2_init", "sigma_n2_init", "learning_rate", "ell_min", "prune_mass"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        if self.batch_size < 1 or self.n_samples < 1:
            raise ConfigError("batch_size and n_samples must be >= 1")
        if self.mode == "gpfa_only" and self.p_s + self.p_b == 0:
            raise ConfigError("gpfa_only needs neural latents (p_s + p_b >= 1)")
        if self.mode not in ("multimodal", "gpfa_only") and self.p_a + self.p_s == 0:
            raise ConfigError(f"{self.mode} needs behavior latents (p_a + p_s >= 1)")

    def partition(self):
        """Partition actually used by the mode; unimodal modes fold the shared block."""
        if self.mode == "multimodal":
            return LatentPartition(self.p_a, self.p_s, self.p_b)
        if self.mode == "gpfa_only":
            return LatentPartition(0, 0, self.p_s + self.p_b)
        return LatentPartition(self.p_a + self.p_s, 0, 0)

    @property
    def uses_behavior(self):
        return self.mode in BEHAVIOR_MODES

    @property
    def uses_neural(self):
        return self.mode in NEURAL_MODES

    @property
    def fourier(self):
        return self.mode in FOURIER_MODES

    def n_freq(self):
        if self.F is not None:
            return self.F
        return prune_count(self.ell_min, self.T, self.prune_mass)

    def per_latent(self, value):
        P = self.partition().P
        if isinstance(value, (list, tuple)):
            if len(value) != P:
                raise ConfigError(f"expected {P} per-latent values, got {len(value)}")
            return [float(v) for v in value]
        return [float(value)] * P

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        """Build from a parsed JSON object; an optional ``preset`` key seeds defaults."""
        return cls(**checked_fields(cls, d, "model"))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def checked_fields(cls, d, section):
    """Validate keys and scalar types of ``d`` against dataclass ``cls``."""
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    preset = d.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"{section}.preset: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        out.update({k: v for k, v in PRESETS[preset].items() if k in known})
    for key, val in d.items():
        if key == "preset":
            continue
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
        default = known[key].default
        numeric = isinstance(default, (int, float)) and not isinstance(default, bool)
        if numeric and key not in ("rho0", "ell0"):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"{section}.{key}: expected a number, got {val!r}")
        if isinstance(default, str) and not isinstance(val, str):
            raise ConfigError(f"{section}.{key}: expected a string, got {val!r}")
        out[key] = val
    return out
