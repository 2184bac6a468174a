"""Desk-scale benchmark pipeline shared by the end-to-end tests.

Generates 2e4 triples, trains the surrogate once and caches dataset, model
and history on disk (``LSBI_TEST_CACHE`` or ``<repo>/.cache``). The cache key
covers the resolved configuration, so changing it retrains.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import yaml

from lsbi_smc.building import GROUND_TRUTH, frf_log_magnitude
from lsbi_smc.config import RunConfig, load_config
from lsbi_smc.dataset import (
    generate_triples,
    load_dataset,
    sample_prior,
    save_dataset,
    split_and_standardize,
)
from lsbi_smc.mvae import TrainingHistory, build_model, load_model, save_model, train

CACHE_VERSION = 1
OVERRIDES = {
    "rng_seed": 0,
    "dataset": {"n_train": 20_000},
    "architecture": {"conv_channels": [8, 16, 32]},
    "training": {"max_epochs": 80},
}


def cache_dir():
    root = os.environ.get("LSBI_TEST_CACHE")
    return Path(root) if root else Path(__file__).resolve().parent.parent / ".cache"


def acceptance_config() -> RunConfig:
    path = cache_dir() / "acceptance.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(OVERRIDES))
    return load_config(path, env={})


def _key(cfg):
    blob = yaml.safe_dump(cfg.to_dict(), sort_keys=True) + f"v{CACHE_VERSION}"
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def trained_benchmark(log=print):
    """(cfg, dataset, model, meta) for the cached desk-scale surrogate."""
    cfg = acceptance_config()
    d = cache_dir() / _key(cfg)
    meta_path = d / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        return cfg, load_dataset(d / "dataset.bin"), load_model(d / "model.bin"), meta
    d.mkdir(parents=True, exist_ok=True)
    lo, hi = cfg.bounds()
    t0 = time.perf_counter()
    thetas = sample_prior(cfg.dataset.n_train, (lo, hi), cfg.seed_for("prior"))
    ds = generate_triples(thetas, cfg.building, cfg.grid, cfg.noise, cfg.seed_for("noise"),
                          bounds=(lo, hi))
    ds = split_and_standardize(ds, cfg.dataset.val_frac, cfg.seed_for("split"))
    save_dataset(ds, d / "dataset.bin")
    t1 = time.perf_counter()
    model = build_model(cfg.architecture, seed=cfg.seed_for("init"))
    model, hist = train(model, ds, cfg.training,
                        progress=lambda r: log(f"epoch {r.epoch} val {r.val_total:.2f} "
                                               f"({r.elapsed_s:.0f} s)"))
    t2 = time.perf_counter()
    save_model(model, d / "model.bin")
    hist.to_csv(d / "history.csv")
    meta = {
        "generate_seconds": t1 - t0,
        "train_seconds": t2 - t1,
        "epochs_run": len(hist.rows) - 1,
        "best_epoch": hist.best_epoch,
        "stopped_early": hist.stopped_early,
        "val_totals": hist.val_totals().tolist(),
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return cfg, ds, model, meta


def observation(cfg, run):
    """Noisy roof FRF of the ground truth for pipeline run ``run``."""
    x = frf_log_magnitude(cfg.building, GROUND_TRUTH, cfg.grid)
    rng = np.random.default_rng(cfg.seed_for("observation", run))
    return x + cfg.noise.sigma_eps * rng.standard_normal(x.shape)


if __name__ == "__main__":
    trained_benchmark()
