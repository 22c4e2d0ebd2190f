"""Command-line entry point: simulate | train | evaluate | compare | gradcheck.

Config files are JSON objects with optional sections ``simulation``,
``model`` and ``compare``; every key is optional and falls back to the
dataclass defaults (``model.preset`` selects one of the per-experiment
presets first).
"""
import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, persistence
from .config import ModelConfig
from .elbo_training import derive_seed, grad_check, init_state, train
from .exceptions import ConfigError, DivergenceError, NumericDomainError, SchemaError, ShapeError
from .simulation import SimConfig, simulate

log = logging.getLogger("mmgpvae")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
LOCK_NAME = ".mmgpvae.lock"


class LockError(OSError):
    pass


@contextlib.contextmanager
def output_lock(directory):
    """Exclusive lock file so two commands never write one directory at once."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise LockError(f"{directory} is in use by another command (remove {lock} if stale)") from e
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def load_config(path):
    """Parse a JSON config file; syntax errors report line and column."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror}") from e
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(cfg) - {"simulation", "model", "compare"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return cfg


def model_config(raw, data, args):
    d = dict(raw.get("model", {}))
    d.setdefault("T", int(data.T))
    for key in ("mode", "epochs", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    return ModelConfig.from_dict(d)


def write_csv(path, rows, columns=None):
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def cmd_simulate(args):
    raw = load_config(args.config)
    d = dict(raw.get("simulation", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SimConfig.from_dict(d)
    out = Path(args.out)
    with output_lock(out.parent if out.suffix else out):
        path = out if out.suffix else out / "dataset.mmgp"
        ds = simulate(cfg)
        persistence.write_dataset(path, ds)
    M, N, T = ds.Y_A.shape[1], ds.Y_B.shape[1], ds.T
    print(f"wrote {path}: {ds.n_trials} trials, M={M} N={N} T={T}, split train={len(ds.train_idx)} test={len(ds.test_idx)}")
    return EXIT_OK


def cmd_train(args):
    raw = load_config(args.config)
    data = persistence.read_dataset(args.dataset)
    with output_lock(args.out) as out:
        if args.resume:
            state = persistence.load_checkpoint(args.resume)
            _check_dims(state.model, data)
            epochs = args.epochs if args.epochs is not None else state.cfg.epochs
        else:
            cfg = model_config(raw, data, args)
            state = init_state(data, cfg)
            epochs = cfg.epochs
        if "ignored_modality" in state.meta:
            log.info("mode %s ignores the %s modality", state.cfg.mode, state.meta["ignored_modality"])

        def progress(row):
            if args.verbose:
                print(f"epoch {row['epoch']:5d}  elbo {row['elbo']:.6e}", flush=True)

        try:
            train(data, state=state, epochs=epochs, progress=progress)
        finally:
            write_csv(out / "trace.csv", state.trace, ["epoch", "elbo", "behavior", "neural", "prior", "entropy"])
        persistence.save_checkpoint(out / "checkpoint.mmgp", state, {"dataset": str(args.dataset)})
    final = state.trace[-1]["elbo"] if state.trace else float("nan")
    print(f"trained {state.cfg.mode} to epoch {state.epoch}; final elbo {final:.6e}; wrote {out}/checkpoint.mmgp")
    return EXIT_OK


def _check_dims(model, data):
    if model.cfg.uses_behavior:
        if data.Y_A is None:
            raise ShapeError("tensor Y_A: missing from dataset but required by the checkpoint's mode")
        if data.Y_A.shape[1] != model.m_obs:
            raise ShapeError(f"tensor Y_A: dataset has M={data.Y_A.shape[1]}, checkpoint expects M={model.m_obs}")
    if model.cfg.uses_neural:
        if data.Y_B is None:
            raise ShapeError("tensor Y_B: missing from dataset but required by the checkpoint's mode")
        if data.Y_B.shape[1] != model.n_obs:
            raise ShapeError(f"tensor Y_B: dataset has N={data.Y_B.shape[1]}, checkpoint expects N={model.n_obs}")
    if data.T != model.cfg.T:
        raise ShapeError(f"time axis: dataset has T={data.T}, checkpoint expects T={model.cfg.T}")


def _split(data, name):
    return {"test": data.test_idx, "train": data.train_idx, "all": np.arange(data.n_trials)}[name]


def report_rows(report):
    warn = int(report.meta["training_split_warning"])
    return [{**r, "seed": report.meta["seed"], "training_split_warning": warn} for r in report.rows]


def latent_rows(report, model_label=None):
    rows = []
    for name, al in report.latents["aligned"].items():
        truth = report.latents["truth"][name]
        for k, trial in enumerate(report.meta["trials"]):
            for t in range(al.shape[-1]):
                row = {"trial": trial, "t": t, "latent": name, "true": truth[k, t], "aligned": al[k, t]}
                rows.append(row if model_label is None else {"model": model_label, **row})
    return rows


def cmd_evaluate(args):
    state = persistence.load_checkpoint(args.checkpoint)
    data = persistence.read_dataset(args.dataset)
    _check_dims(state.model, data)
    idx = _split(data, args.split)
    seed = state.cfg.seed if args.seed is None else args.seed
    report = evaluation.reconstruction_metrics(state.model, data, indices=idx, seed=seed)
    with output_lock(args.out) as out:
        write_csv(out / "per_trial.csv", report_rows(report))
        summary = [{"metric": k, "value": v} for k, v in sorted(report.summary.items())]
        write_csv(out / "summary.csv", summary, ["metric", "value"])
        long = evaluation.long_format({(state.cfg.mode, seed): report})
        write_csv(out / "long.csv", long, ["model", "seed", "trial", "metric", "value"])
        write_csv(out / "latents.csv", latent_rows(report), ["trial", "t", "latent", "true", "aligned"])
        var = evaluation.subspace_variance(state.model, data, indices=idx)
        shares = evaluation.variance_shares(var)
        rows = []
        for modality, blocks in var.items():
            for block, v in blocks.items():
                for k, trial in enumerate(idx):
                    rows.append({"trial": int(trial), "modality": modality, "block": block,
                                 "variance": v[k], "share": shares[modality][block][k]})
        write_csv(out / "subspace_variance.csv", rows, ["trial", "modality", "block", "variance", "share"])
    if report.meta["training_split_warning"]:
        print("warning: evaluated trials overlap the training split", file=sys.stderr)
    if not any(k in data.truth for k in ("z_a", "z_s", "z_b")):
        print("note: no ground-truth latents in dataset; latent metrics skipped", file=sys.stderr)
    for k, v in sorted(report.summary.items()):
        print(f"{k:28s} {v}")
    return EXIT_OK


def cmd_compare(args):
    raw = load_config(args.config)
    data = persistence.read_dataset(args.dataset)
    comp = raw.get("compare", {})
    modes = args.modes.split(",") if args.modes else comp.get("modes")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else comp.get("seeds", [0])
    if not modes or len(modes) < 2:
        raise ConfigError("compare.modes: list at least two modes")
    labels, cfgs = [], {}
    for mode in modes:
        label = mode if mode not in cfgs else f"{mode}#{sum(l.startswith(mode) for l in labels) + 1}"
        labels.append(label)
        d = dict(raw.get("model", {}), mode=mode)
        d.setdefault("T", int(data.T))
        if args.epochs is not None:
            d["epochs"] = args.epochs
        cfgs[label] = ModelConfig.from_dict(d)
    if len(seeds) < 2:
        print("warning: seed ladder of length 1; comparisons rest on a single fit", file=sys.stderr)
    reports = {}
    with output_lock(args.out) as out:
        manifest = {"modes": labels, "seeds": seeds, "completed": [], "status": "running"}
        try:
            for seed in seeds:
                for label in labels:
                    state = train(data, cfgs[label].replace(seed=seed))
                    rep = evaluation.reconstruction_metrics(state.model, data, seed=seed)
                    reports[(label, seed)] = rep
                    manifest["completed"].append({"model": label, "seed": seed})
                    print(f"{label:20s} seed {seed}: " + ", ".join(
                        f"{k}={v:.4g}" for k, v in rep.summary.items() if k.endswith("_mean")), flush=True)
            manifest["status"] = "complete"
        except Exception as e:
            manifest["status"] = f"aborted: {type(e).__name__}: {e}"
            raise
        finally:
            _write_comparison(out, reports, labels, seeds, manifest)
    return EXIT_OK


def _write_comparison(out, reports, labels, seeds, manifest):
    table = [{"model": label, "seed": seed, **rep.summary} for (label, seed), rep in reports.items()]
    write_csv(out / "comparison.csv", table)
    write_csv(out / "long.csv", evaluation.long_format(reports), ["model", "seed", "trial", "metric", "value"])
    lat = []
    for (label, seed), rep in reports.items():
        lat.extend({"seed": seed, **r} for r in latent_rows(rep, label))
    write_csv(out / "latents.csv", lat, ["seed", "model", "trial", "t", "latent", "true", "aligned"])
    tests, scatter = [], []
    done_seeds = [s for s in seeds if all((l, s) in reports for l in labels)]
    if labels and done_seeds:
        ref = labels[0]
        metrics = [m for m in reports[(ref, done_seeds[0])].rows[0] if m != "trial"]
        for metric in metrics:
            scatter.extend(evaluation.pairwise_scatter(reports, ref, metric))
            for other in labels[1:]:
                if all(metric in reports[(other, s)].rows[0] for s in done_seeds):
                    tests.extend(evaluation.paired_comparison(reports, ref, other, metric, done_seeds))
    write_csv(out / "sign_tests.csv", tests, ["seed", "better", "worse", "metric", "wins", "n", "p", "mean_better", "mean_worse"])
    write_csv(out / "scatter.csv", scatter,
              ["reference", "model", "seed", "trial", "metric", "reference_value", "model_value"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_gradcheck(args):
    raw = load_config(args.config)
    d = {"mode": "multimodal", "T": 8, "F": 5, "p_a": 1, "p_s": 1, "p_b": 1, "enc_hidden_a": [4], "enc_hidden_b": [4],
         "dec_hidden": [4], "sigma_y2_init": 1.0, "ell0": 3.0, **raw.get("model", {})}
    if args.mode is not None:
        d["mode"] = args.mode
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = ModelConfig.from_dict(d)
    gen = np.random.default_rng(derive_seed(cfg.seed, "gradcheck"))
    K, M, N = 2, 3, 3
    Y_A = gen.standard_normal((K, M, cfg.T)) * 0.5
    Y_B = gen.poisson(1.0, (K, N, cfg.T)).astype(float)
    from .elbo_training import MMGPVAE

    model = MMGPVAE(cfg, M, N, d_B=torch.zeros(N, dtype=torch.float64))
    noise = model.draw_noise((K,), torch.Generator().manual_seed(derive_seed(cfg.seed, "gradcheck-noise")))
    report = grad_check(model, Y_A, Y_B, noise)
    print(report)
    print("PASS" if report.passed else f"FAIL: {', '.join(report.failing)}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser():
    p = argparse.ArgumentParser(prog="mmgpvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="dataset file, or a directory to hold dataset.mmgp")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="fit a model and write checkpoint.mmgp and trace.csv")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--mode")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="write held-out metric CSVs for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="train and evaluate several modes over a seed ladder")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--modes", help="comma-separated; overrides compare.modes")
    s.add_argument("--seeds", help="comma-separated; overrides compare.seeds")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gradcheck", help="finite-difference check of the ELBO gradient on a tiny instance")
    s.add_argument("--config")
    s.add_argument("--mode")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("MMGPVAE_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: MMGPVAE_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericDomainError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, SchemaError, ShapeError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
