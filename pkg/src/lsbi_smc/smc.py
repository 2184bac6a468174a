"""Adaptive-tempering SMC sampler with a random-walk Metropolis move kernel.

The target at level t is proportional to L(theta)^beta_t * p(theta) for a
uniform box prior p. Each round picks beta_t so the incremental importance
weights keep an ESS of gamma * N_s, resamples systematically, then moves every
particle with ``n_mcmc_steps`` RWMH sweeps under a Gaussian proposal whose
covariance is the weighted particle covariance scaled by b^2.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import MaxRoundsExceeded, NumericalError, ParameterError


@dataclass
class SMCConfig:
    n_particles: int = 2000
    gamma: float = 0.8
    b: float = 0.2
    n_mcmc_steps: int = 10
    max_rounds: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ParameterError(f"n_particles must be >= 2, got {self.n_particles}")
        if not 0 < self.gamma < 1:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.b > 0:
            raise ParameterError(f"b must be positive, got {self.b}")
        if self.n_mcmc_steps < 1:
            raise ParameterError(f"n_mcmc_steps must be >= 1, got {self.n_mcmc_steps}")
        if self.max_rounds < 1:
            raise ParameterError(f"max_rounds must be >= 1, got {self.max_rounds}")


@dataclass
class ParticlePopulation:
    positions: np.ndarray
    log_lhat: np.ndarray
    beta: float = 0.0
    round_index: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError(f"beta must lie in [0, 1], got {self.beta}")
        if len(self.positions) != len(self.log_lhat):
            raise ParameterError("positions and log_lhat lengths differ")


@dataclass
class SMCDiagnostics:
    betas: list = field(default_factory=list)
    ess: list = field(default_factory=list)
    acceptance_rate: list = field(default_factory=list)
    log_evidence_increments: list = field(default_factory=list)
    elapsed_s: list = field(default_factory=list)
    n_eval_gross: int = 0
    n_out_of_box: int = 0
    n_nonfinite: int = 0

    @property
    def log_evidence(self) -> float:
        return float(np.sum(self.log_evidence_increments))

    @property
    def n_eval_net(self) -> int:
        return self.n_eval_gross - self.n_out_of_box

    @property
    def n_rounds(self) -> int:
        return len(self.betas)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "beta", "ess", "acceptance_rate",
                        "log_evidence_increment", "elapsed_s"])
            for i, row in enumerate(zip(self.betas, self.ess, self.acceptance_rate,
                                        self.log_evidence_increments, self.elapsed_s), 1):
                w.writerow([i, *row])


def _clean(log_lhat):
    ll = np.asarray(log_lhat, dtype=np.float64)
    return np.where(np.isnan(ll), -np.inf, ll)


def log_weights(log_lhat, dbeta):
    """Incremental log-weights dbeta * ln L, max-shifted; -inf stays -inf."""
    ll = _clean(log_lhat)
    finite = np.isfinite(ll)
    if not finite.any():
        raise NumericalError("no particle has a finite log-likelihood")
    shifted = np.where(finite, ll - ll[finite].max(), -np.inf)
    if dbeta == 0:
        return np.where(finite, 0.0, -np.inf)
    return dbeta * shifted


def ess(log_lhat, dbeta) -> float:
    """Effective sample size (sum w)^2 / sum w^2 of w_i = L_i^dbeta."""
    if dbeta < 0:
        raise ParameterError(f"dbeta must be nonnegative, got {dbeta}")
    w = np.exp(log_weights(log_lhat, dbeta))
    s1 = w.sum()
    if not s1 > 0:
        raise NumericalError("all importance weights underflowed")
    return float(s1 * s1 / np.dot(w, w))


def find_next_beta(log_lhat, beta_prev, gamma, n_particles=None, tol=1e-12, max_iter=200):
    """Next tempering exponent so that ESS(beta - beta_prev) = gamma * N_s.

    Returns 1 when the full remaining increment already keeps the ESS above
    target. Otherwise bisects on the increment; the returned value is the
    upper end of the final bracket, so it always exceeds ``beta_prev``.
    """
    if not 0 <= beta_prev < 1:
        raise ParameterError(f"beta_prev must lie in [0, 1), got {beta_prev}")
    n = len(log_lhat) if n_particles is None else n_particles
    target = gamma * n
    remaining = 1.0 - beta_prev
    if ess(log_lhat, remaining) >= target:
        return 1.0
    lo, hi = 0.0, remaining
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if ess(log_lhat, mid) >= target:
            lo = mid
        else:
            hi = mid
    return min(1.0, beta_prev + hi)


def systematic_resample(weights, rng) -> np.ndarray:
    """Indices drawn by systematic resampling with one uniform offset."""
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise NumericalError("weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise NumericalError("weights sum to zero")
    n = len(w)
    cdf = np.cumsum(w / total)
    cdf[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


def resample(population: ParticlePopulation, weights, rng) -> ParticlePopulation:
    idx = systematic_resample(weights, rng)
    return ParticlePopulation(
        population.positions[idx].copy(), population.log_lhat[idx].copy(),
        population.beta, population.round_index,
    )


def proposal_covariance(positions, weights, b):
    """b^2 times the weighted particle covariance, with a small diagonal jitter.

    Sigma = b^2 * sum_i w_i / (S * N) (theta_i - mean)(theta_i - mean)^T with
    S = sum_i w_i / N and ``mean`` the weighted mean. A cloud with zero spread
    falls back to b^2 * 1e-6 * I and warns.
    """
    x = np.asarray(positions, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, d = x.shape
    s = w.sum() / n
    coef = w / (s * n)
    mean = coef @ x
    dx = x - mean
    cov = b**2 * (dx.T * coef) @ dx
    cov = 0.5 * (cov + cov.T)
    tr = np.trace(cov)
    if not tr > 0:
        warnings.warn("degenerate particle cloud; using isotropic fallback proposal",
                      RuntimeWarning, stacklevel=2)
        return b**2 * 1e-6 * np.eye(d)
    return cov + 1e-10 * tr / d * np.eye(d)


def in_box(x, low, high):
    return np.all((x >= low) & (x <= high), axis=1)


def mcmc_move(population: ParticlePopulation, cov, evaluator, n_steps, rng, bounds,
              diagnostics: SMCDiagnostics | None = None):
    """RWMH sweeps at tempering level ``population.beta``.

    Each sweep proposes for all particles, evaluates every in-box candidate in
    one batched call and accepts with probability min(1, (L*/L)^beta).
    Out-of-box candidates are rejected without evaluation. Returns the moved
    population and the acceptance rate.
    """
    low, high = (np.asarray(v, dtype=np.float64) for v in bounds)
    L = np.linalg.cholesky(cov)
    pos = population.positions.copy()
    ll = _clean(population.log_lhat).copy()
    beta = population.beta
    n, d = pos.shape
    accepted = 0
    for _ in range(n_steps):
        cand = pos + rng.standard_normal((n, d)) @ L.T
        log_u = np.log(rng.random(n))
        inside = in_box(cand, low, high)
        cand_ll = np.full(n, -np.inf)
        if inside.any():
            vals = np.asarray(evaluator(cand[inside]), dtype=np.float64)
            cand_ll[inside] = vals
        nonfinite = inside & ~np.isfinite(cand_ll)
        cand_ll = _clean(cand_ll)
        with np.errstate(invalid="ignore"):
            log_ratio = beta * (cand_ll - ll)
        # a finite candidate always beats a -inf current state
        log_ratio = np.where(np.isfinite(cand_ll) & ~np.isfinite(ll), np.inf, log_ratio)
        acc = inside & np.isfinite(cand_ll) & (log_u < log_ratio)
        pos[acc] = cand[acc]
        ll[acc] = cand_ll[acc]
        accepted += int(acc.sum())
        if diagnostics is not None:
            diagnostics.n_eval_gross += n
            diagnostics.n_out_of_box += int((~inside).sum())
            diagnostics.n_nonfinite += int(nonfinite.sum())
    moved = ParticlePopulation(pos, ll, beta, population.round_index)
    return moved, accepted / (n * n_steps)


def run(bounds, evaluator, config: SMCConfig, callback=None):
    """Sample from L(theta) * Uniform(box) by adaptive tempering.

    ``evaluator`` maps an (B, D) array to B log-likelihoods (NaN or -inf mark
    impossible points). Returns ``(positions, diagnostics)``.
    """
    low, high = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in bounds)
    if low.shape != high.shape or np.any(high <= low):
        raise ParameterError(f"invalid prior box low={low}, high={high}")
    rng = np.random.default_rng(config.rng_seed)
    n, d = config.n_particles, len(low)
    diag = SMCDiagnostics()
    t0 = time.perf_counter()
    pos = low + (high - low) * rng.random((n, d))
    ll = _clean(evaluator(pos))
    diag.n_eval_gross += n
    pop = ParticlePopulation(pos, ll, 0.0, 0)
    while pop.beta < 1.0:
        if pop.round_index >= config.max_rounds:
            raise MaxRoundsExceeded(
                f"beta={pop.beta:.6g} after {config.max_rounds} rounds", diagnostics=diag
            )
        beta_next = find_next_beta(pop.log_lhat, pop.beta, config.gamma, n)
        logw = log_weights(pop.log_lhat, beta_next - pop.beta)
        diag.log_evidence_increments.append(
            float(logsumexp(logw) - np.log(n))
            + (beta_next - pop.beta) * float(np.max(pop.log_lhat[np.isfinite(pop.log_lhat)]))
        )
        w = np.exp(logw)
        diag.ess.append(float(w.sum() ** 2 / np.dot(w, w)))
        cov = proposal_covariance(pop.positions, w, config.b)
        pop = resample(pop, w, rng)
        pop.beta = beta_next
        pop.round_index += 1
        pop, acc = mcmc_move(pop, cov, evaluator, config.n_mcmc_steps, rng, (low, high), diag)
        diag.betas.append(beta_next)
        diag.acceptance_rate.append(acc)
        diag.elapsed_s.append(time.perf_counter() - t0)
        if callback is not None:
            callback(pop, diag)
    return pop.positions, diag


def save_samples_csv(path, samples, names=None):
    samples = np.atleast_2d(samples)
    names = names or [f"theta_{i + 1}" for i in range(samples.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in samples:
            w.writerow([repr(float(v)) for v in row])


def load_samples_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ParameterError(f"{path}: no samples")
    return np.array([[float(v) for v in r] for r in rows[1:]])
