"""Tensor container files for datasets and model checkpoints.

Layout of a container::

    8 bytes   magic  b"MMGPVAE\\0"
    8 bytes   header length H, unsigned little-endian
    H bytes   UTF-8 JSON header
    payload   float64 little-endian tensors, row-major, back to back

The header carries ``schema_version``, ``kind`` and a ``tensors`` directory
of ``{name, shape, offset, nbytes}`` records (offsets relative to the start
of the payload), plus free-form metadata.
"""
import json
import struct
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import SchemaError

MAGIC = b"MMGPVAE\x00"
SCHEMA_VERSION = 1


def write_container(path, kind, tensors, meta):
    """Write named arrays plus JSON metadata; returns the path."""
    path = Path(path)
    directory, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        blob = a.tobytes(order="C")
        directory.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"schema_version": SCHEMA_VERSION, "kind": kind, "tensors": directory, **meta}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            for blob in blobs:
                f.write(blob)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e
    return path


def read_container(path, kind=None):
    """Read a container; returns ``(header, {name: ndarray})``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror}") from e
    if data[:8] != MAGIC:
        raise SchemaError(f"{path}: not an mmgpvae container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path}: corrupt header ({e})") from e
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise SchemaError(f"{path}: expected a {kind} container, found {header.get('kind')!r}")
    payload = memoryview(data)[16 + hlen :]
    tensors = {}
    for rec in header["tensors"]:
        n = int(np.prod(rec["shape"], dtype=np.int64)) * 8
        if rec["nbytes"] != n or rec["offset"] + n > len(payload):
            raise SchemaError(f"{path}: tensor {rec['name']!r} does not match its declared shape {rec['shape']}")
        arr = np.frombuffer(payload[rec["offset"] : rec["offset"] + n], dtype="<f8")
        tensors[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)
    return header, tensors


@dataclass
class Dataset:
    """Paired trials plus optional ground truth.

    ``Y_A`` is (trials, M, T) behavior, ``Y_B`` is (trials, N, T) neural;
    either may be ``None``. ``truth`` holds generative latents ``z_a``,
    ``z_s``, ``z_b`` (trials, T), ``rates`` (trials, N, T) and optionally
    ``images_clean``.
    """

    Y_A: np.ndarray | None
    Y_B: np.ndarray | None
    train_idx: np.ndarray
    test_idx: np.ndarray
    truth: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_trials(self):
        return (self.Y_A if self.Y_A is not None else self.Y_B).shape[0]

    @property
    def T(self):
        return (self.Y_A if self.Y_A is not None else self.Y_B).shape[-1]

    @property
    def clean_images(self):
        return self.truth.get("images_clean", self.Y_A)

    def header(self):
        M = int(self.Y_A.shape[1]) if self.Y_A is not None else 0
        N = int(self.Y_B.shape[1]) if self.Y_B is not None else 0
        p_true = sum(1 for k in ("z_a", "z_s", "z_b") if k in self.truth)
        return {
            "dims": {"M": M, "N": N, "T": int(self.T), "P_true": p_true},
            "n_trials": int(self.n_trials),
            "split": {"train": [int(i) for i in self.train_idx], "test": [int(i) for i in self.test_idx]},
            "seed": self.meta.get("seed"),
            "generator": self.meta.get("generator", {}),
        }


def write_dataset(path, ds):
    tensors = {}
    if ds.Y_A is not None:
        tensors["Y_A"] = ds.Y_A
    if ds.Y_B is not None:
        tensors["Y_B"] = ds.Y_B
    for k, v in ds.truth.items():
        tensors[f"truth/{k}"] = v
    return write_container(path, "dataset", tensors, ds.header())


def read_dataset(path):
    header, t = read_container(path, "dataset")
    dims = header["dims"]
    for name, axis, key in (("Y_A", 1, "M"), ("Y_B", 1, "N")):
        if name in t and (t[name].shape[axis] != dims[key] or t[name].shape[-1] != dims["T"]):
            raise SchemaError(f"{path}: tensor {name} shape {t[name].shape} disagrees with header dims {dims}")
    truth = {k.split("/", 1)[1]: v for k, v in t.items() if k.startswith("truth/")}
    return Dataset(
        Y_A=t.get("Y_A"),
        Y_B=t.get("Y_B"),
        train_idx=np.asarray(header["split"]["train"], dtype=np.int64),
        test_idx=np.asarray(header["split"]["test"], dtype=np.int64),
        truth=truth,
        meta={"seed": header.get("seed"), "generator": header.get("generator", {}), "dims": dims},
    )


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def save_checkpoint(path, state, extra_meta=None):
    """Model parameters, ADAM moments, config echo and the ELBO trace."""
    tensors = {f"param/{k}": v.detach().numpy() for k, v in state.model.state_dict().items()}
    opt_state = state.optimizer.state_dict()
    names = [n for n, _ in state.model.named_parameters()]
    steps = {}
    for idx, st in opt_state["state"].items():
        name = names[idx]
        tensors[f"adam/exp_avg/{name}"] = st["exp_avg"].numpy()
        tensors[f"adam/exp_avg_sq/{name}"] = st["exp_avg_sq"].numpy()
        steps[name] = float(st["step"])
    meta = {
        "config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "final_elbo": state.trace[-1]["elbo"] if state.trace else None,
        "trace": state.trace,
        "adam_steps": steps,
        "state_meta": state.meta,
        "version": git_describe(),
        "dims": {"M": state.model.m_obs, "N": state.model.n_obs, "T": state.cfg.T},
        **(extra_meta or {}),
    }
    return write_container(path, "checkpoint", tensors, meta)


def load_checkpoint(path):
    from .config import ModelConfig
    from .elbo_training import MMGPVAE, TrainState

    header, t = read_container(path, "checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    dims = header["dims"]
    model = MMGPVAE(cfg, dims["M"], dims["N"])
    sd = model.state_dict()
    for k in sd:
        key = f"param/{k}"
        if key not in t:
            raise SchemaError(f"{path}: missing parameter tensor {k!r}")
        if tuple(t[key].shape) != tuple(sd[k].shape):
            raise SchemaError(f"{path}: parameter {k!r} has shape {t[key].shape}, model expects {tuple(sd[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(t[f"param/{k}"].copy()) for k in sd})
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    names = [n for n, _ in model.named_parameters()]
    steps = header.get("adam_steps", {})
    if steps:
        osd = opt.state_dict()
        osd["state"] = {
            i: {
                "step": torch.tensor(steps[n]),
                "exp_avg": torch.from_numpy(t[f"adam/exp_avg/{n}"].copy()),
                "exp_avg_sq": torch.from_numpy(t[f"adam/exp_avg_sq/{n}"].copy()),
            }
            for i, n in enumerate(names)
            if n in steps
        }
        opt.load_state_dict(osd)
    return TrainState(model=model, optimizer=opt, epoch=header["epoch"], trace=header["trace"], meta=header.get("state_meta", {}))
