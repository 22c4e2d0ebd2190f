"""Held-out metrics: affine latent alignment, reconstruction errors, model comparison."""
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .fourier_gp import as_tensor
from .elbo_training import dataset_elbo, train
from .latent_model import mix_latents

TRUE_LATENTS = {"a": "z_a", "s": "z_s", "b": "z_b"}


@dataclass
class AlignmentMap:
    """truth ~= A @ est + b, applied at every time bin."""

    A: np.ndarray
    b: np.ndarray

    def apply(self, est):
        return np.einsum("qp,...pt->...qt", self.A, est) + self.b[:, None]


def align_latents(est, truth):
    """Least-squares affine map from estimated to true latents.

    ``est`` is (trials, P, T) and ``truth`` (trials, Q, T); a single 2-D
    array is treated as one latent per trial. Returns the map and the aligned
    estimates of shape (trials, Q, T).
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.ndim == 2:
        est = est[:, None, :]
    if truth.ndim == 2:
        truth = truth[:, None, :]
    if est.shape[0] != truth.shape[0] or est.shape[-1] != truth.shape[-1]:
        raise ValueError(f"trial/time mismatch: est {est.shape}, truth {truth.shape}")
    P, Q = est.shape[1], truth.shape[1]
    X = np.moveaxis(est, 1, -1).reshape(-1, P)
    X = np.hstack([X, np.ones((X.shape[0], 1))])
    Y = np.moveaxis(truth, 1, -1).reshape(-1, Q)
    coef, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    if rank < P + 1:
        warnings.warn(f"rank-deficient alignment (rank {rank} < {P + 1}); using the minimum-norm solution", RuntimeWarning)
    amap = AlignmentMap(A=coef[:P].T.copy(), b=coef[P].copy())
    return amap, amap.apply(est)


def per_trial_mse(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)


def sign_test(better, worse):
    """One-sided paired sign test that ``better`` is smaller than ``worse``.

    Ties are dropped. Returns ``(wins, n, p)``.
    """
    d = np.asarray(worse) - np.asarray(better)
    wins, n = int((d > 0).sum()), int((d != 0).sum())
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def standard_error(x):
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")


@dataclass
class EvalReport:
    """Per-trial metric table plus summaries for one model on one trial set."""

    rows: list
    summary: dict
    meta: dict = field(default_factory=dict)
    latents: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([r[name] for r in self.rows])


def _latent_candidates(model):
    """Map of true-latent name -> list of (label, estimated rows) to score."""
    part, mode = model.part, model.cfg.mode
    if mode == "multimodal":
        return {TRUE_LATENTS[k]: [(k, getattr(part, k))] for k in part.block_names()}
    rows = [(f"latent{p}", slice(p, p + 1)) for p in range(part.P)]
    names = ["z_s", "z_b"] if mode == "gpfa_only" else ["z_s", "z_a"]
    return {name: rows for name in names}


def latent_metrics(model, z_est, truth):
    """Aligned latent errors, scoring every candidate for unimodal models."""
    out, aligned = {}, {}
    for true_name, cands in _latent_candidates(model).items():
        if true_name not in truth:
            continue
        z_true = np.asarray(truth[true_name])
        var = float(z_true.var())
        best = None
        for label, rows in cands:
            _, al = align_latents(z_est[:, rows, :], z_true)
            mse = per_trial_mse(al[:, 0, :], z_true)
            if best is None or mse.mean() < best[1].mean():
                best = (label, mse, al[:, 0, :])
        label, mse, al = best
        out[true_name] = {"candidate": label, "mse": mse, "nmse": mse / var, "variance": var}
        aligned[true_name] = al
    return out, aligned


def reconstruction_metrics(model, data, indices=None, seed=0):
    """Decode posterior means of held-out trials and score them.

    Image error is against the clean rendered frames, rate error against the
    generative rates; latent errors are computed after an affine alignment
    fitted on the same trials. Missing ground truth skips the corresponding
    metrics.
    """
    idx = data.test_idx if indices is None else np.asarray(indices)
    cfg = model.cfg
    Y_A = data.Y_A[idx] if (cfg.uses_behavior and data.Y_A is not None) else None
    Y_B = data.Y_B[idx] if (cfg.uses_neural and data.Y_B is not None) else None
    rec = model.reconstruct(Y_A, Y_B)
    z = rec["z"].numpy()
    rows = [{"trial": int(k)} for k in idx]
    summary = {}
    if "Y_A" in rec:
        clean = data.truth.get("images_clean", data.Y_A)[idx]
        img = per_trial_mse(rec["Y_A"].numpy(), clean)
        for r, v in zip(rows, img):
            r["image_mse"] = float(v)
    if "rates" in rec and "rates" in data.truth:
        rate = per_trial_mse(rec["rates"].numpy(), data.truth["rates"][idx])
        for r, v in zip(rows, rate):
            r["rate_mse"] = float(v)
    truth = {k: data.truth[k][idx] for k in ("z_a", "z_s", "z_b") if k in data.truth}
    lat, aligned = latent_metrics(model, z, truth)
    for name, m in lat.items():
        for r, v, nv in zip(rows, m["mse"], m["nmse"]):
            r[f"{name}_mse"] = float(v)
            r[f"{name}_nmse"] = float(nv)
        summary[f"{name}_candidate"] = m["candidate"]
        summary[f"{name}_variance"] = m["variance"]
    for key in rows[0]:
        if key == "trial":
            continue
        col = np.array([r[key] for r in rows])
        summary[f"{key}_mean"] = float(col.mean())
        summary[f"{key}_se"] = standard_error(col)
    elbo = dataset_elbo(model, as_tensor(Y_A) if Y_A is not None else None,
                        as_tensor(Y_B) if Y_B is not None else None, seed=seed)
    summary["elbo"] = elbo["elbo"]
    train_set = set(int(i) for i in data.train_idx)
    on_train = any(int(k) in train_set for k in idx)
    meta = {"mode": cfg.mode, "seed": seed, "trials": [int(k) for k in idx], "training_split_warning": on_train}
    latents = {"z_est": z, "aligned": aligned, "truth": truth}
    return EvalReport(rows=rows, summary=summary, meta=meta, latents=latents)


@torch.no_grad()
def subspace_variance(model, data, indices=None):
    """Variance over time of reconstructions driven by one latent block at a time.

    Returns ``{modality: {block: (trials,) array}}``; each value is the
    per-trial variance across time, averaged over output dimensions. Other
    blocks are zeroed and offsets kept.
    """
    idx = data.test_idx if indices is None else np.asarray(indices)
    cfg, part = model.cfg, model.part
    Y_A = data.Y_A[idx] if (cfg.uses_behavior and data.Y_A is not None) else None
    Y_B = data.Y_B[idx] if (cfg.uses_neural and data.Y_B is not None) else None
    z = model.to_time(model.posterior(Y_A, Y_B).mu)
    out = {"behavior": {}, "neural": {}}
    for name in part.block_names():
        zk = torch.zeros_like(z)
        rows = getattr(part, name)
        zk[..., rows, :] = z[..., rows, :]
        x_A, x_B = mix_latents(zk, model.loadings, part)
        if cfg.uses_behavior and name in ("a", "s"):
            recon = model.decoder(x_A)
            out["behavior"][name] = recon.var(dim=-1, unbiased=False).mean(dim=-1).numpy()
        if cfg.uses_neural and name in ("s", "b"):
            out["neural"][name] = x_B.var(dim=-1, unbiased=False).mean(dim=-1).numpy()
    return out


def compare_models(data, cfgs, seeds=(0,), train_fn=None, progress=None):
    """Train and evaluate each config under every seed on the same split.

    ``cfgs`` maps a label to a ModelConfig. Returns ``(reports, table)``,
    with ``reports[(label, seed)]`` an EvalReport and ``table`` a list of
    summary rows (one per label and seed).
    """
    train_fn = train_fn or train
    if len(seeds) < 2:
        warnings.warn("seed ladder of length 1; comparisons rest on a single fit", UserWarning)
    reports, table = {}, []
    for seed in seeds:
        for label, cfg in cfgs.items():
            state = train_fn(data, cfg.replace(seed=int(seed)))
            rep = reconstruction_metrics(state.model, data, seed=int(seed))
            reports[(label, int(seed))] = rep
            table.append({"model": label, "seed": int(seed), **rep.summary})
            if progress is not None:
                progress(label, seed, rep)
    return reports, table


def paired_comparison(reports, better, worse, metric, seeds):
    """Sign tests of ``better`` vs ``worse`` on a per-trial metric for each seed."""
    out = []
    for seed in seeds:
        a = reports[(better, seed)].column(metric)
        b = reports[(worse, seed)].column(metric)
        wins, n, p = sign_test(a, b)
        out.append({"seed": seed, "better": better, "worse": worse, "metric": metric,
                    "wins": wins, "n": n, "p": p, "mean_better": float(a.mean()), "mean_worse": float(b.mean())})
    return out


def long_format(reports):
    """Plot-ready rows ``(model, seed, trial, metric, value)``."""
    rows = []
    for (label, seed), rep in reports.items():
        for r in rep.rows:
            for k, v in r.items():
                if k != "trial":
                    rows.append({"model": label, "seed": seed, "trial": r["trial"], "metric": k, "value": v})
    return rows


def pairwise_scatter(reports, reference, metric):
    """Per-trial (reference, other) metric pairs for every other model."""
    rows = []
    for (label, seed), rep in reports.items():
        if label == reference or (reference, seed) not in reports:
            continue
        ref = reports[(reference, seed)]
        for r_ref, r in zip(ref.rows, rep.rows):
            if metric in r and metric in r_ref:
                rows.append({"reference": reference, "model": label, "seed": seed, "trial": r["trial"],
                             "metric": metric, "reference_value": r_ref[metric], "model_value": r[metric]})
    return rows


def variance_shares(variances):
    """Normalize per-block variances to fractions of their per-trial total within each modality."""
    out = {}
    for modality, blocks in variances.items():
        if not blocks:
            continue
        total = sum(blocks.values())
        safe = np.where(total > 0, total, 1.0)
        out[modality] = {k: np.where(total > 0, v / safe, 0.0) for k, v in blocks.items()}
    return out
