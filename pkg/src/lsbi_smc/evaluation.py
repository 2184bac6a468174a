"""Posterior quality metrics: MMD, mode coverage, predictive FRF envelopes,
and a PCA export of the latent space."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .building import EQUIVALENT_MODES, frf_log_magnitude_all, natural_frequencies
from .errors import ParameterError


@dataclass
class MMDConfig:
    bandwidth: float | None = None  # None -> median heuristic on the pooled set
    max_reference: int = 5000
    max_median_points: int = 2000

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ParameterError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.max_reference < 2:
            raise ParameterError("max_reference must be >= 2")


@dataclass
class ModeCatalog:
    modes: np.ndarray
    radius: float = 0.15

    def __post_init__(self):
        self.modes = np.atleast_2d(np.asarray(self.modes, dtype=float))
        if len(self.modes) > 1:
            dmin = pdist(self.modes).min()
            if not dmin > 2 * self.radius:
                raise ParameterError(
                    f"modes closer ({dmin:.3f}) than twice the radius {self.radius}"
                )

    @classmethod
    def equivalent(cls, radius=0.15):
        return cls(EQUIVALENT_MODES.copy(), radius)


def median_bandwidth(x, y, max_points=2000):
    """Median pairwise Euclidean distance of the pooled sample.

    Pooled rows are put in lexicographic order before any subsampling, so the
    result does not depend on argument order or row order.
    """
    z = np.concatenate([np.atleast_2d(x), np.atleast_2d(y)])
    z = z[np.lexsort(z.T[::-1])]
    if len(z) > max_points:
        z = z[np.linspace(0, len(z) - 1, max_points).astype(int)]
    h = float(np.median(pdist(z)))
    if not h > 0:
        raise ParameterError("median heuristic bandwidth is zero (all points identical)")
    return h


def _kernel_sum(a, b, h, block=1024):
    total = 0.0
    for s in range(0, len(a), block):
        d2 = cdist(a[s:s + block], b, "sqeuclidean")
        total += np.exp(-d2 / (2 * h * h)).sum()
    return total


def mmd_squared(x, y, cfg: MMDConfig | None = None, bandwidth=None):
    """Unbiased estimate of MMD^2 with a Gaussian RBF kernel.

    Within-set sums drop the diagonal. For equal sample sizes the cross term
    also drops the paired diagonal (the paired U-statistic), so identical
    inputs give exactly zero. May be slightly negative.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ParameterError("mmd_squared needs at least 2 samples in each set")
    cfg = cfg or MMDConfig()
    h = bandwidth or cfg.bandwidth or median_bandwidth(x, y, cfg.max_median_points)
    sxx = _kernel_sum(x, x, h) - n
    syy = _kernel_sum(y, y, h) - m
    sxy = _kernel_sum(x, y, h)
    if n == m:
        paired = np.exp(-np.sum((x - y) ** 2, axis=1) / (2 * h * h)).sum()
        return float((sxx + syy - 2 * (sxy - paired)) / (n * (n - 1)))
    return float(sxx / (n * (n - 1)) + syy / (m * (m - 1)) - 2 * sxy / (n * m))


def mmd(samples, reference, cfg: MMDConfig | None = None, rng=None):
    """Reported metric sqrt(max(MMD^2, 0)); the reference is subsampled to
    ``cfg.max_reference`` rows."""
    cfg = cfg or MMDConfig()
    reference = np.atleast_2d(reference)
    if len(reference) > cfg.max_reference:
        rng = np.random.default_rng(rng)
        reference = reference[rng.choice(len(reference), cfg.max_reference, replace=False)]
    return float(np.sqrt(max(mmd_squared(samples, reference, cfg), 0.0)))


def mode_coverage(samples, catalog: ModeCatalog):
    """Fraction of samples assigned to each mode (nearest, within radius).

    Returns ``(fractions, unassigned_fraction)``; together they sum to 1.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    d = cdist(samples, catalog.modes)
    nearest = d.argmin(axis=1)
    hit = d[np.arange(len(samples)), nearest] <= catalog.radius
    counts = np.bincount(nearest[hit], minlength=len(catalog.modes))
    n = len(samples)
    return counts / n, (n - counts.sum()) / n


def posterior_predictive_frf(samples, spec, grid, n_draws=None, rng=None,
                             quantiles=(0.025, 0.5, 0.975)):
    """Pointwise quantiles of ln|H| over posterior draws, every floor.

    Returns an array of shape (len(quantiles), n_points, n_stories).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n = len(samples)
    n_draws = n if n_draws is None else n_draws
    if not 1 <= n_draws <= n:
        raise ParameterError(f"n_draws must lie in [1, {n}], got {n_draws}")
    if n_draws < n:
        idx = np.random.default_rng(rng).choice(n, n_draws, replace=False)
        samples = samples[idx]
    frfs = np.stack([frf_log_magnitude_all(spec, th, grid) for th in samples])
    return np.quantile(frfs, quantiles, axis=0)


def envelope_widths(envelope):
    """Maximum (upper - lower) width per floor of a 3-quantile envelope."""
    return np.max(envelope[-1] - envelope[0], axis=0)


def envelope_coverage(envelope, frf, story_index):
    """Fraction of frequency points where ``frf`` lies inside the envelope."""
    lo, hi = envelope[0][:, story_index], envelope[-1][:, story_index]
    return float(np.mean((frf >= lo) & (frf <= hi)))


def write_envelope_csv(path, frequencies, envelope, quantiles=(0.025, 0.5, 0.975)):
    n_q, _, n_s = envelope.shape
    header = ["frequency_hz"] + [
        f"story{s + 1}_q{q * 100:g}" for s in range(n_s) for q in quantiles
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, f in enumerate(frequencies):
            w.writerow([f] + [envelope[q, j, s] for s in range(n_s) for q in range(n_q)])


def pca_fit(data, n_components=None):
    """Principal components via SVD. Returns (mean, components, variances).

    Components with zero variance are dropped with a warning.
    """
    data = np.asarray(data, dtype=np.float64)
    mean = data.mean(axis=0)
    centered = data - mean
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    var = sv**2 / max(len(data) - 1, 1)
    tol = sv.max(initial=0.0) * max(data.shape) * np.finfo(float).eps
    rank = int(np.sum(sv > tol))
    k = len(sv) if n_components is None else n_components
    if rank < k:
        warnings.warn(f"latent cloud has rank {rank} < {k} requested components",
                      RuntimeWarning, stacklevel=2)
        k = rank
    return mean, vt[:k], var[:k]


def latent_projection_export(model, thetas, x_obs_standardized, spec, modes=EQUIVALENT_MODES,
                             n_components=2):
    """Rows for a 2-D view of the theta-encoder latent means.

    PCA is fitted on the latent means of ``thetas``; the equivalent modes (theta
    encoder) and the observation (x encoder) are projected with it. Every row
    carries natural frequencies f1..fN (blank for the observation).
    """
    from .likelihood import encode_observation
    from .mvae import encode_theta

    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    norm = model.normalization
    low, high = np.asarray(norm["theta_low"]), np.asarray(norm["theta_high"])
    scale = lambda th: ((th - low) / (high - low)).astype(np.float32)
    z = encode_theta(model, scale(thetas)).mean
    mean, comps, _ = pca_fit(z, n_components)
    proj = lambda zz: (np.atleast_2d(zz) - mean) @ comps.T
    rows = []
    for th, p in zip(thetas, proj(z)):
        rows.append(("sample", *_pad(p, n_components), *natural_frequencies(spec, th)))
    z_modes = encode_theta(model, scale(np.atleast_2d(modes))).mean
    for i, (th, p) in enumerate(zip(np.atleast_2d(modes), proj(z_modes)), 1):
        rows.append((f"mode{i}", *_pad(p, n_components), *natural_frequencies(spec, th)))
    z_obs = encode_observation(model, x_obs_standardized).latent.mean
    rows.append(("observation", *_pad(proj(z_obs)[0], n_components),
                 *([np.nan] * spec.n_stories)))
    header = ["label"] + [f"pc{i + 1}" for i in range(n_components)] + [
        f"f{i + 1}_hz" for i in range(spec.n_stories)
    ]
    return header, rows


def _pad(p, k):
    return list(p) + [0.0] * (k - len(p))


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
