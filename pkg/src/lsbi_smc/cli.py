"""Command-line pipeline: generate, train, observe, infer, evaluate, benchmark.

Exit status 0 on success, 2 for usage, configuration or input errors and 3 for
runtime failures. Every command writes ``config.resolved.yaml`` into the
output directory before doing any heavy work.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .building import FrequencyGrid, frf_log_magnitude, frf_log_magnitude_all
from .config import ConfigError, RunConfig, dump_config, load_config
from .dataset import (
    generate_triples,
    load_dataset,
    sample_prior,
    save_dataset,
    split_and_standardize,
)
from .errors import FormatError, LSBIError, NumericalError, ParameterError
from .evaluation import (
    MMDConfig,
    ModeCatalog,
    envelope_coverage,
    envelope_widths,
    latent_projection_export,
    mmd,
    mode_coverage,
    posterior_predictive_frf,
    write_envelope_csv,
    write_rows_csv,
)
from .likelihood import LatentLikelihood
from .mvae import build_model, load_model, save_model, train
from . import smc

log = logging.getLogger("lsbi_smc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- file helpers


def write_observation_csv(path, frequencies, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_hz", "log_abs_H"])
        for f, v in zip(frequencies, values):
            w.writerow([repr(float(f)), repr(float(v))])


def read_observation_csv(path, grid: FrequencyGrid):
    """Observation vector from a (frequency_hz, log_abs_H) CSV on ``grid``."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise UsageError(f"observation file not found: {path}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["frequency_hz", "log_abs_H"]:
        raise UsageError(f"{path}: header must be 'frequency_hz,log_abs_H'")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise UsageError(f"{path}: non-numeric entry ({exc})") from exc
    expected = grid.frequencies
    if data.ndim != 2 or data.shape != (len(expected), 2) or not np.allclose(
        data[:, 0], expected, rtol=0, atol=1e-9
    ):
        raise UsageError(
            f"{path}: frequency grid mismatch; expected {grid.n_points} points from "
            f"{grid.f_start} Hz in steps of {grid.f_step} Hz"
        )
    if not np.all(np.isfinite(data[:, 1])):
        raise UsageError(f"{path}: observation contains non-finite values")
    return data[:, 1]


def _require_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, args, out: Path):
    n = args.n_train or cfg.dataset.n_train
    lo, hi = cfg.bounds()
    thetas = sample_prior(n, (lo, hi), cfg.seed_for("prior"))
    ds = generate_triples(thetas, cfg.building, cfg.grid, cfg.noise, cfg.seed_for("noise"),
                          bounds=(lo, hi), output_story=cfg.dataset.output_story,
                          workers=cfg.workers)
    ds = split_and_standardize(ds, cfg.dataset.val_frac, cfg.seed_for("split"))
    ds.seeds["prior"] = cfg.seed_for("prior")
    path = out / "dataset.bin"
    save_dataset(ds, path)
    print(f"wrote {path} ({len(ds)} triples) digest {ds.digest()}")


def cmd_train(cfg: RunConfig, args, out: Path):
    path = _require_file(args.dataset, "dataset")
    ds = load_dataset(path)
    if not ds.is_split:
        raise UsageError(f"{path}: dataset is not split/standardized")
    if ds.responses_clean.shape[1] != cfg.architecture.n_x:
        raise UsageError(
            f"{path}: responses have {ds.responses_clean.shape[1]} points, "
            f"architecture expects {cfg.architecture.n_x}"
        )
    model = build_model(cfg.architecture, seed=cfg.seed_for("init"))
    progress = (lambda r: log.info("epoch %d train %.3f val %.3f", r.epoch,
                                   r.train_total, r.val_total))
    model, history = train(model, ds, cfg.training, progress=progress)
    save_model(model, out / "model.bin")
    history.to_csv(out / "history.csv")
    print(f"wrote {out / 'model.bin'} (best epoch {history.best_epoch}, "
          f"val {history.val_totals()[history.best_epoch]:.4f})")


def cmd_observe(cfg: RunConfig, args, out: Path):
    theta = np.asarray(cfg.observation.theta, dtype=float)
    x = frf_log_magnitude(cfg.building, theta, cfg.grid, cfg.dataset.output_story)
    rng = np.random.default_rng(cfg.seed_for("observation"))
    x_noisy = x + cfg.noise.sigma_eps * rng.standard_normal(x.shape)
    write_observation_csv(out / "observation.csv", cfg.grid.frequencies, x_noisy)
    print(f"wrote {out / 'observation.csv'}")


def _evaluator(cfg, args):
    model = load_model(_require_file(args.model, "model"))
    x_obs = read_observation_csv(_require_file(args.observation, "observation"), cfg.grid)
    if model.arch.n_x != len(x_obs):
        raise UsageError(f"model expects {model.arch.n_x} frequency points, got {len(x_obs)}")
    return LatentLikelihood.from_raw_observation(model, x_obs, workers=cfg.workers)


def cmd_infer(cfg: RunConfig, args, out: Path):
    evaluator = _evaluator(cfg, args)
    smc_cfg = cfg.smc if args.n_particles is None else replace(cfg.smc, n_particles=args.n_particles)
    samples, diag = smc.run(cfg.bounds(), evaluator, smc_cfg)
    smc.save_samples_csv(out / "posterior.csv", samples)
    diag.to_csv(out / "diagnostics.csv")
    _write_json(out / "summary.json", {
        "n_particles": smc_cfg.n_particles,
        "n_rounds": diag.n_rounds,
        "final_beta": diag.betas[-1],
        "log_evidence": diag.log_evidence,
        "n_eval_gross": diag.n_eval_gross,
        "n_eval_net": diag.n_eval_net,
        "n_nonfinite": diag.n_nonfinite,
        "elapsed_s": diag.elapsed_s[-1],
    })
    print(f"wrote {out / 'posterior.csv'} ({len(samples)} samples, {diag.n_rounds} rounds)")


def _load_samples(path, what):
    try:
        return smc.load_samples_csv(_require_file(path, what))
    except ValueError as exc:
        raise UsageError(f"{path}: malformed sample CSV ({exc})") from exc


def cmd_evaluate(cfg: RunConfig, args, out: Path):
    samples = _load_samples(args.posterior, "posterior")
    ev = cfg.evaluation
    catalog = ModeCatalog.equivalent(ev.mode_radius)
    fractions, unassigned = mode_coverage(samples, catalog)
    metrics = {
        "n_samples": len(samples),
        "mode_fractions": fractions.tolist(),
        "unassigned_fraction": float(unassigned),
    }
    if args.reference:
        ref = _load_samples(args.reference, "reference")
        mcfg = MMDConfig(bandwidth=ev.mmd_bandwidth, max_reference=ev.max_reference)
        metrics["mmd"] = mmd(samples, ref, mcfg, rng=cfg.seed_for("evaluation"))
    n_draws = min(ev.n_predictive_draws, len(samples))
    env = posterior_predictive_frf(samples, cfg.building, cfg.grid, n_draws,
                                   rng=cfg.seed_for("evaluation", 1))
    write_envelope_csv(out / "envelope.csv", cfg.grid.frequencies, env)
    metrics["envelope_max_width"] = envelope_widths(env).tolist()
    truth = frf_log_magnitude_all(cfg.building, np.asarray(cfg.observation.theta), cfg.grid)
    roof = cfg.building.n_stories - 1
    metrics["truth_roof_coverage"] = envelope_coverage(env, truth[:, roof], roof)
    if args.model and args.observation:
        model = load_model(_require_file(args.model, "model"))
        x_obs = read_observation_csv(_require_file(args.observation, "observation"), cfg.grid)
        norm = model.normalization
        x_std = (x_obs - np.asarray(norm["x_mean"])) / np.asarray(norm["x_std"])
        k = min(ev.n_projection_samples, len(samples))
        idx = np.random.default_rng(cfg.seed_for("evaluation", 2)).choice(len(samples), k,
                                                                          replace=False)
        header, rows = latent_projection_export(model, samples[np.sort(idx)],
                                                x_std.astype(np.float32), cfg.building)
        write_rows_csv(out / "latent_projection.csv", header, rows)
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics))


def cmd_benchmark(cfg: RunConfig, args, out: Path):
    evaluator = _evaluator(cfg, args)
    bcfg = cfg.benchmark
    if args.reference:
        ref = _load_samples(args.reference, "reference")
    else:
        ref_cfg = replace(cfg.smc, n_particles=bcfg.reference_particles,
                          rng_seed=cfg.seed_for("smc", 10**6))
        ref, _ = smc.run(cfg.bounds(), evaluator, ref_cfg)
        smc.save_samples_csv(out / "reference.csv", ref)
    mcfg = MMDConfig(bandwidth=cfg.evaluation.mmd_bandwidth,
                     max_reference=cfg.evaluation.max_reference)
    rows = []
    for n_s in bcfg.n_particles:
        mmds, gross, net, wall = [], [], [], []
        for r in range(bcfg.n_runs):
            run_cfg = replace(cfg.smc, n_particles=int(n_s), rng_seed=cfg.seed_for("smc", r + 1))
            t0 = time.perf_counter()
            samples, diag = smc.run(cfg.bounds(), evaluator, run_cfg)
            wall.append(time.perf_counter() - t0)
            gross.append(diag.n_eval_gross)
            net.append(diag.n_eval_net)
            mmds.append(mmd(samples, ref, mcfg, rng=cfg.seed_for("evaluation", r)))
        rows.append(["SMC", int(n_s), float(np.mean(gross)), float(np.mean(net)),
                     float(np.mean(mmds)), float(np.std(mmds, ddof=1)) if len(mmds) > 1 else 0.0,
                     float(np.mean(wall))])
        log.info("N_s=%d mmd %.4f", n_s, rows[-1][4])
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "n_particles", "n_eval_gross", "n_eval_net",
                    "mmd_mean", "mmd_std", "wall_clock_s"])
        w.writerows(rows)
    print(f"wrote {out / 'benchmark.csv'} ({len(rows)} rows)")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "observe": cmd_observe,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out-dir", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="global seed (overrides LSBI_SEED)")
    common.add_argument("--workers", type=int, help="worker threads (overrides LSBI_WORKERS)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lsbi-smc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common], help="simulate training triples")
    p.add_argument("--n-train", type=int, help="number of triples")
    p = sub.add_parser("train", parents=[common], help="train the MVAE")
    p.add_argument("--dataset", help="dataset file from 'generate'")
    sub.add_parser("observe", parents=[common], help="synthesize a noisy observation CSV")
    p = sub.add_parser("infer", parents=[common], help="run SMC on an observation")
    p.add_argument("--model")
    p.add_argument("--observation")
    p.add_argument("--n-particles", type=int)
    p = sub.add_parser("evaluate", parents=[common], help="score a posterior sample")
    p.add_argument("--posterior")
    p.add_argument("--reference")
    p.add_argument("--model")
    p.add_argument("--observation")
    p = sub.add_parser("benchmark", parents=[common], help="MMD/cost table over N_s")
    p.add_argument("--model")
    p.add_argument("--observation")
    p.add_argument("--reference")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
        if getattr(args, "n_train", None) is not None and args.n_train < 1:
            raise UsageError("--n-train must be >= 1")
        cfg = load_config(args.config, {"rng_seed": args.seed, "workers": args.workers,
                                        "out_dir": args.out_dir})
        torch.set_num_threads(cfg.workers)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.resolved.yaml")
        COMMANDS[args.command](cfg, args, out)
    except (UsageError, ConfigError, ParameterError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LSBIError, NumericalError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
