"""Training triples (theta, x, x_noisy) for the multimodal VAE."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .building import FrequencyGrid, ShearBuildingSpec, frf_log_magnitude_batch
from .container import read_container, write_container
from .errors import FormatError, ParameterError

DATASET_MAGIC = b"LSBIDSET"
DATASET_VERSION = 1


@dataclass(frozen=True)
class NoiseModel:
    sigma_eps: float = 0.2

    def __post_init__(self):
        if not self.sigma_eps >= 0:
            raise ParameterError(f"sigma_eps must be nonnegative, got {self.sigma_eps}")


@dataclass
class TrainingDataset:
    """Raw triples plus split and normalization metadata.

    Arrays are kept unstandardized; ``standardize_x`` and ``scale_theta``
    apply the stored statistics on demand.
    """

    thetas: np.ndarray
    responses_clean: np.ndarray
    responses_noisy: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]
    sigma_eps: float = 0.0
    building: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    output_story: int | None = None
    seeds: dict = field(default_factory=dict)
    permutation: np.ndarray | None = None
    n_val: int = 0
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.thetas)
        if len(self.responses_clean) != n or len(self.responses_noisy) != n:
            raise ParameterError("thetas, responses_clean and responses_noisy lengths differ")
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        self.bounds = (lo, hi)

    def __len__(self):
        return len(self.thetas)

    @property
    def is_split(self) -> bool:
        return self.permutation is not None

    @property
    def train_index(self) -> np.ndarray:
        self._require_split()
        return self.permutation[: len(self) - self.n_val]

    @property
    def val_index(self) -> np.ndarray:
        self._require_split()
        return self.permutation[len(self) - self.n_val:]

    def _require_split(self):
        if not self.is_split:
            raise ParameterError("dataset has not been split and standardized yet")

    def scale_theta(self, theta):
        lo, hi = self.bounds
        return (np.asarray(theta, dtype=float) - lo) / (hi - lo)

    def unscale_theta(self, theta_scaled):
        lo, hi = self.bounds
        return lo + np.asarray(theta_scaled, dtype=float) * (hi - lo)

    def standardize_x(self, x):
        self._require_split()
        return ((np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std).astype(np.float32)

    def partition(self, which: str):
        """Scaled thetas and standardized (x, x_noisy) for 'train' or 'val'."""
        idx = {"train": self.train_index, "val": self.val_index}[which]
        return (
            self.scale_theta(self.thetas[idx]).astype(np.float32),
            self.standardize_x(self.responses_clean[idx]),
            self.standardize_x(self.responses_noisy[idx]),
        )

    def normalization(self) -> dict:
        self._require_split()
        return {
            "theta_low": self.bounds[0].tolist(),
            "theta_high": self.bounds[1].tolist(),
            "x_mean": self.x_mean.astype(float).tolist(),
            "x_std": self.x_std.astype(float).tolist(),
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.thetas, self.responses_clean, self.responses_noisy):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.is_split:
            h.update(self.permutation.tobytes())
        return h.hexdigest()[:16]


def _check_bounds(bounds, dim=None, allow_degenerate=False):
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if dim is not None:
        lo = np.broadcast_to(lo, (dim,)).copy()
        hi = np.broadcast_to(hi, (dim,)).copy()
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ParameterError("bounds must be two 1-D arrays of equal length")
    bad = hi < lo if allow_degenerate else hi <= lo
    if np.any(bad) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ParameterError(f"degenerate or invalid prior box: low={lo}, high={hi}")
    return lo, hi


def sample_prior(n, bounds, rng_seed, dim=None, allow_degenerate=False):
    """i.i.d. uniform draws over the box ``bounds = (low, high)``.

    ``low``/``high`` may be scalars when ``dim`` is given. Point intervals are
    accepted only with ``allow_degenerate=True`` (used in tests).
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    lo, hi = _check_bounds(bounds, dim, allow_degenerate)
    rng = np.random.default_rng(rng_seed)
    return lo + (hi - lo) * rng.random((n, len(lo)))


def generate_triples(thetas, spec: ShearBuildingSpec, grid: FrequencyGrid, noise: NoiseModel,
                     rng_seed, bounds=None, output_story=None, workers=1, chunk=512):
    """Simulate x = h(theta) and x_noisy = x + eps for every row of ``thetas``.

    Simulation runs in float64, results are stored as float32. Noise is drawn
    from a single stream after simulation so the output does not depend on
    ``workers``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.size == 0:
        raise ParameterError("thetas must be nonempty")
    if bounds is None:
        bounds = (thetas.min(axis=0), thetas.max(axis=0))
    starts = list(range(0, len(thetas), chunk))

    def run(s):
        try:
            return frf_log_magnitude_batch(spec, thetas[s:s + chunk], grid, output_story)
        except Exception as exc:
            idx = getattr(exc, "index", None)
            if idx is not None:
                exc.index = s + idx
                exc.args = (f"simulator failed on sample {s + idx}: {exc.__cause__}",)
            raise

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    clean = np.concatenate(parts)
    rng = np.random.default_rng(rng_seed)
    noisy = clean + noise.sigma_eps * rng.standard_normal(clean.shape)
    return TrainingDataset(
        thetas=thetas.astype(np.float32),
        responses_clean=clean.astype(np.float32),
        responses_noisy=noisy.astype(np.float32),
        bounds=bounds,
        sigma_eps=float(noise.sigma_eps),
        building=asdict(spec),
        grid=asdict(grid),
        output_story=output_story,
        seeds={"noise": _seed_repr(rng_seed)},
    )


def _seed_repr(seed):
    return seed if seed is None or isinstance(seed, int) else str(seed)


def split_and_standardize(ds: TrainingDataset, val_frac=0.1, rng_seed=0, min_std=None):
    """Random train/validation split plus per-feature statistics of x.

    Mean and standard deviation are computed from the clean responses of the
    training rows only. Standard deviations are floored at ``min_std``
    (default: the noise level, or 1e-12 without noise); the zero-frequency
    point is constant across all parameters and would otherwise divide by 0.
    """
    if ds.is_split:
        raise ParameterError("dataset is already split and standardized")
    if not 0 < val_frac < 1:
        raise ParameterError(f"val_frac must lie in (0, 1), got {val_frac}")
    n = len(ds)
    n_val = int(np.floor(val_frac * n))
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(n).astype(np.int64)
    train = perm[: n - n_val]
    x = ds.responses_clean[train].astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    if min_std is None:
        min_std = ds.sigma_eps if ds.sigma_eps > 0 else 1e-12
    std = np.maximum(std, min_std)
    seeds = dict(ds.seeds, split=_seed_repr(rng_seed))
    return replace(ds, permutation=perm, n_val=n_val, x_mean=mean, x_std=std, seeds=seeds)


def save_dataset(ds: TrainingDataset, path):
    meta = {
        "count": len(ds),
        "n_val": ds.n_val,
        "sigma_eps": ds.sigma_eps,
        "building": ds.building,
        "grid": ds.grid,
        "output_story": ds.output_story,
        "seeds": ds.seeds,
        "split": ds.is_split,
    }
    arrays = {
        "thetas": ds.thetas,
        "responses_clean": ds.responses_clean,
        "responses_noisy": ds.responses_noisy,
        "bound_low": ds.bounds[0],
        "bound_high": ds.bounds[1],
    }
    if ds.is_split:
        arrays.update(permutation=ds.permutation, x_mean=ds.x_mean, x_std=ds.x_std)
    write_container(path, DATASET_MAGIC, DATASET_VERSION, meta, arrays)


def load_dataset(path) -> TrainingDataset:
    meta, arrays = read_container(path, DATASET_MAGIC, DATASET_VERSION)
    try:
        ds = TrainingDataset(
            thetas=arrays["thetas"],
            responses_clean=arrays["responses_clean"],
            responses_noisy=arrays["responses_noisy"],
            bounds=(arrays["bound_low"], arrays["bound_high"]),
            sigma_eps=meta["sigma_eps"],
            building=meta["building"],
            grid=meta["grid"],
            output_story=meta["output_story"],
            seeds=meta["seeds"],
            permutation=arrays.get("permutation"),
            n_val=meta["n_val"],
            x_mean=arrays.get("x_mean"),
            x_std=arrays.get("x_std"),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
    if len(ds) != meta["count"]:
        raise FormatError(f"{path}: count mismatch")
    return ds
