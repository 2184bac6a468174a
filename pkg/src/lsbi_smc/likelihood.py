"""Closed-form latent-space likelihood for diagonal Gaussian encoders.

For encodings q_x = N(a, diag(s)) of the observation and q_theta = N(b, diag(t))
of a parameter, and the prior p(z) = N(0, I),

    L(theta) = prod_d  integral N(z|a_d,s_d) N(z|b_d,t_d) / N(z|0,1) dz.

Per dimension, the product of the two Gaussians equals
N(a-b | 0, s+t) * N(z | c, u) with c = (a t + b s)/(s+t) and u = s t/(s+t), and
E_{N(c,u)}[sqrt(2 pi) exp(z^2/2)] = sqrt(2 pi / (1-u)) exp(c^2 / (2(1-u)))
whenever u < 1. The normalizing evidence constant is dropped.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DivergentIntegralError, NumericalError, ParameterError
from .mvae import MVAE, GaussianLatent, encode_x



@dataclass(frozen=True)
class ObservationEncoding:
    latent: GaussianLatent
    digest: str


def encode_observation(model: MVAE, x_obs_standardized) -> ObservationEncoding:
    x = np.asarray(x_obs_standardized, dtype=np.float32)
    latent = encode_x(model, x)
    if not (np.all(np.isfinite(latent.mean)) and np.all(np.isfinite(latent.log_var))):
        raise NumericalError("x encoder produced non-finite output for the observation")
    return ObservationEncoding(latent, hashlib.sha256(x.tobytes()).hexdigest()[:16])


def log_integral_terms(a, s, b, t):
    """Per-dimension ln I_d (broadcasting); NaN where u_d >= 1."""
    a, s, b, t = (np.asarray(v, dtype=np.float64) for v in (a, s, b, t))
    st = s + t
    c = (a * t + b * s) / st
    u = s * t / st
    one_minus_u = 1.0 - u
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (
            -0.5 * np.log(st) - (a - b) ** 2 / (2 * st)
            - 0.5 * np.log(one_minus_u)
            + c**2 / (2 * one_minus_u)
        )
    return np.where(one_minus_u > 0, out, np.nan)


def log_lhat(obs, theta_latent: GaussianLatent) -> float:
    """Log surrogate likelihood for one parameter encoding.

    ``obs`` is an ObservationEncoding or a GaussianLatent. Raises
    DivergentIntegralError naming the dimensions where u_d >= 1.
    """
    q_x = obs.latent if isinstance(obs, ObservationEncoding) else obs
    for v in (q_x.mean, q_x.log_var, theta_latent.mean, theta_latent.log_var):
        if not np.all(np.isfinite(v)):
            raise NumericalError("non-finite encoder output")
    terms = log_integral_terms(q_x.mean, q_x.var, theta_latent.mean, theta_latent.var)
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        raise DivergentIntegralError(
            f"latent likelihood integral diverges in dimension(s) {bad.tolist()} (u_d >= 1)",
            dims=bad.tolist(),
        )
    return float(terms.sum())


class LatentLikelihood:
    """Batched log-likelihood evaluator theta (raw units) -> ln L_hat.

    The observation is encoded once. Parameters are scaled to [0, 1] with the
    model's normalization and pushed through the theta encoder in fixed-size,
    zero-padded chunks so each row's result does not depend on batch size,
    chunk position or worker count.
    """

    def __init__(self, model: MVAE, x_obs_standardized, chunk_size=256, workers=1):
        model.check_finite()
        self.model = model.eval()
        self.obs = encode_observation(model, x_obs_standardized)
        norm = model.normalization
        d = model.arch.n_theta
        self.low = np.asarray(norm.get("theta_low", np.zeros(d)), dtype=np.float64)
        self.high = np.asarray(norm.get("theta_high", np.ones(d)), dtype=np.float64)
        self.chunk_size = int(chunk_size)
        self.workers = max(1, int(workers))
        self.n_evaluations = 0

    @classmethod
    def from_raw_observation(cls, model, x_obs, **kw):
        norm = model.normalization
        x = (np.asarray(x_obs, dtype=np.float64) - np.asarray(norm["x_mean"])) / np.asarray(
            norm["x_std"]
        )
        return cls(model, x.astype(np.float32), **kw)

    def encode_thetas(self, thetas):
        """Theta-encoder latent means and log-variances (float64) for raw thetas."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        n = len(thetas)
        scaled = (thetas - self.low) / (self.high - self.low)
        c = self.chunk_size
        pad = (-n) % c
        buf = np.concatenate([scaled, np.zeros((pad, scaled.shape[1]))]).astype(np.float32)
        starts = range(0, len(buf), c)
        enc = self.model.theta_encoder
        dtype = self.model.dtype

        def run(s):
            with torch.no_grad():
                m, lv = enc(torch.as_tensor(buf[s:s + c], dtype=dtype))
            return m.numpy().astype(np.float64), lv.numpy().astype(np.float64)

        if self.workers > 1 and len(buf) > c:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(s) for s in starts]
        mean = np.concatenate([p[0] for p in parts])[:n]
        log_var = np.concatenate([p[1] for p in parts])[:n]
        return mean, log_var

    def log_lhat_batch(self, thetas, on_divergence="raise"):
        """ln L_hat for each row of ``thetas``.

        Rows whose integral diverges are NaN. With ``on_divergence='raise'`` a
        DivergentIntegralError lists them and carries the other rows' values.
        """
        mean, log_var = self.encode_thetas(thetas)
        self.n_evaluations += len(mean)
        q = self.obs.latent
        terms = log_integral_terms(q.mean, q.var, mean, np.exp(log_var))
        bad_encoder = ~(np.all(np.isfinite(mean), axis=1) & np.all(np.isfinite(log_var), axis=1))
        values = terms.sum(axis=1)
        values[bad_encoder] = np.nan
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size and on_divergence == "raise":
            dims = sorted(set(np.flatnonzero(~np.all(np.isfinite(terms[bad]), axis=0)).tolist()))
            raise DivergentIntegralError(
                f"latent likelihood diverges for row(s) {bad.tolist()[:20]}",
                rows=bad.tolist(), dims=dims, values=values,
            )
        if on_divergence not in ("raise", "nan"):
            raise ParameterError(f"unknown on_divergence mode {on_divergence!r}")
        return values

    def __call__(self, thetas):
        return self.log_lhat_batch(thetas, on_divergence="nan")


def log_lhat_batch(model: MVAE, obs_x, thetas, workers=1, chunk_size=256, on_divergence="raise"):
    """Encode ``obs_x`` (standardized) once and evaluate ln L_hat for raw ``thetas``."""
    ev = LatentLikelihood(model, obs_x, chunk_size=chunk_size, workers=workers)
    return ev.log_lhat_batch(thetas, on_divergence=on_divergence)
