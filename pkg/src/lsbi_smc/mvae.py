"""Multimodal VAE: a theta encoder, an x encoder and one Gaussian decoder.

Both encoders emit diagonal Gaussians over a shared latent space with a
standard normal prior. The decoder maps a latent code to a diagonal Gaussian
over standardized responses.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_container, write_container
from .errors import FormatError, ModelCorruptionError, ParameterError, TrainingDivergedError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"LSBIMVAE"
MODEL_VERSION = 1
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class GaussianLatent:
    mean: np.ndarray
    log_var: np.ndarray

    @property
    def var(self):
        return np.exp(self.log_var)


@dataclass(frozen=True)
class MVAEArchitecture:
    n_x: int = 1024
    n_theta: int = 4
    n_z: int = 8
    conv_channels: tuple = (16, 32, 64)
    kernel_size: int = 5
    fc_hidden: int = 128
    theta_width: int = 128
    theta_layers: int = 3
    decoder_logvar_clamp: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if min(self.n_x, self.n_theta, self.n_z, self.fc_hidden, self.theta_width) < 1:
            raise ParameterError("architecture sizes must be positive")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ParameterError("conv_channels must be a nonempty list of positive ints")
        if self.kernel_size % 2 == 0:
            raise ParameterError("kernel_size must be odd")

    @property
    def reduced_length(self):
        return math.ceil(self.n_x / 2 ** len(self.conv_channels))


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    patience_epochs: int = 20
    alpha: float = 5.0
    max_epochs: int = 500
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.max_epochs > 0):
            raise ParameterError("learning_rate, batch_size and max_epochs must be positive")
        if self.patience_epochs < 0 or self.alpha < 0:
            raise ParameterError("patience_epochs and alpha must be nonnegative")


class LossTerms(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    pred: torch.Tensor
    regul: torch.Tensor


class _ConvDown(nn.Module):
    def __init__(self, c_in, c_out, k):
        super().__init__()
        p = k // 2
        self.down = nn.Conv1d(c_in, c_out, k, stride=2, padding=p)
        self.conv1 = nn.Conv1d(c_out, c_out, k, padding=p)
        self.conv2 = nn.Conv1d(c_out, c_out, k, padding=p)

    def forward(self, h):
        h = F.relu(self.down(h))
        return F.relu(h + self.conv2(F.relu(self.conv1(h))))


class _ConvUp(nn.Module):
    def __init__(self, c_in, c_out, k):
        super().__init__()
        p = k // 2
        self.up = nn.Conv1d(c_in, c_out, k, padding=p)
        self.conv1 = nn.Conv1d(c_out, c_out, k, padding=p)
        self.conv2 = nn.Conv1d(c_out, c_out, k, padding=p)

    def forward(self, h):
        h = F.relu(self.up(F.interpolate(h, scale_factor=2, mode="nearest")))
        return F.relu(h + self.conv2(F.relu(self.conv1(h))))


class ThetaEncoder(nn.Module):
    def __init__(self, arch: MVAEArchitecture):
        super().__init__()
        self.inp = nn.Linear(arch.n_theta, arch.theta_width)
        self.blocks = nn.ModuleList(
            nn.Linear(arch.theta_width, arch.theta_width) for _ in range(arch.theta_layers)
        )
        self.head = nn.Linear(arch.theta_width, 2 * arch.n_z)

    def forward(self, theta):
        h = F.relu(self.inp(theta))
        for lin in self.blocks:
            h = F.relu(h + lin(h))
        return self.head(h).chunk(2, dim=-1)


class XEncoder(nn.Module):
    def __init__(self, arch: MVAEArchitecture):
        super().__init__()
        self.n_x = arch.n_x
        self.padded = arch.reduced_length * 2 ** len(arch.conv_channels)
        chans = (1,) + arch.conv_channels
        self.blocks = nn.ModuleList(
            _ConvDown(a, b, arch.kernel_size) for a, b in zip(chans[:-1], chans[1:])
        )
        self.fc = nn.Linear(arch.conv_channels[-1] * arch.reduced_length, arch.fc_hidden)
        self.head = nn.Linear(arch.fc_hidden, 2 * arch.n_z)

    def forward(self, x):
        h = x.unsqueeze(1)
        if self.padded > self.n_x:
            h = F.pad(h, (0, self.padded - self.n_x), mode="replicate")
        for block in self.blocks:
            h = block(h)
        h = F.relu(self.fc(h.flatten(1)))
        return self.head(h).chunk(2, dim=-1)


class Decoder(nn.Module):
    """Mirror of the x encoder; the last upsampling feeds the output head directly."""

    def __init__(self, arch: MVAEArchitecture):
        super().__init__()
        self.n_x = arch.n_x
        self.length = arch.reduced_length
        self.clamp = arch.decoder_logvar_clamp
        chans = arch.conv_channels
        self.c_last = chans[-1]
        self.fc1 = nn.Linear(arch.n_z, arch.fc_hidden)
        self.fc2 = nn.Linear(arch.fc_hidden, self.c_last * self.length)
        rev = chans[::-1]
        self.blocks = nn.ModuleList(
            _ConvUp(a, b, arch.kernel_size) for a, b in zip(rev[:-1], rev[1:])
        )
        self.head = nn.Conv1d(chans[0], 2, arch.kernel_size, padding=arch.kernel_size // 2)

    def forward(self, z):
        h = F.relu(self.fc1(z))
        h = F.relu(self.fc2(h)).view(-1, self.c_last, self.length)
        for block in self.blocks:
            h = block(h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        out = self.head(h)[..., : self.n_x]
        mean, log_var = out[:, 0], out[:, 1]
        return mean, log_var.clamp(-self.clamp, self.clamp)


class MVAE(nn.Module):
    """Network container plus the normalization metadata of its dataset."""

    def __init__(self, arch: MVAEArchitecture, normalization: dict | None = None):
        super().__init__()
        self.arch = arch
        self.normalization = dict(normalization or {})
        self.theta_encoder = ThetaEncoder(arch)
        self.x_encoder = XEncoder(arch)
        self.decoder = Decoder(arch)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def check_finite(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise ModelCorruptionError(f"non-finite values in parameter {name}")


def build_model(arch: MVAEArchitecture, normalization=None, seed=0, dtype=torch.float32) -> MVAE:
    """Fresh model with PyTorch's default fan-in scaled uniform initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MVAE(arch, normalization)
    return model.to(dtype)


def _as_tensor(model, arr):
    return torch.as_tensor(np.asarray(arr), dtype=model.dtype)


def _latent(mean, log_var, squeeze):
    mean = mean.detach().cpu().numpy().astype(np.float64)
    log_var = log_var.detach().cpu().numpy().astype(np.float64)
    if squeeze:
        mean, log_var = mean[0], log_var[0]
    return GaussianLatent(mean, log_var)


def encode_theta(model: MVAE, theta_scaled) -> GaussianLatent:
    """Latent Gaussian q(z | theta) for a scaled parameter vector (or rows)."""
    model.check_finite()
    arr = np.asarray(theta_scaled)
    with torch.no_grad():
        mean, log_var = model.theta_encoder(_as_tensor(model, np.atleast_2d(arr)))
    return _latent(mean, log_var, arr.ndim == 1)


def encode_x(model: MVAE, x_standardized) -> GaussianLatent:
    """Latent Gaussian q(z | x) for a standardized response vector (or rows)."""
    model.check_finite()
    arr = np.asarray(x_standardized)
    with torch.no_grad():
        mean, log_var = model.x_encoder(_as_tensor(model, np.atleast_2d(arr)))
    return _latent(mean, log_var, arr.ndim == 1)


def decode(model: MVAE, z):
    """Mean and log-variance of p(x | z) in standardized response units."""
    model.check_finite()
    arr = np.asarray(z)
    if not np.all(np.isfinite(arr)):
        raise ParameterError("latent code must be finite")
    with torch.no_grad():
        mean, log_var = model.decoder(_as_tensor(model, np.atleast_2d(arr)))
    mean = mean.cpu().numpy().astype(np.float64)
    log_var = log_var.cpu().numpy().astype(np.float64)
    if arr.ndim == 1:
        return mean[0], log_var[0]
    return mean, log_var


def kl_diag_gauss(q_mean, q_log_var, p_mean, p_log_var):
    """KL(q || p) between diagonal Gaussians, summed over the last axis.

    Works on numpy arrays or torch tensors alike.
    """
    lib = torch if isinstance(q_mean, torch.Tensor) else np
    d = q_log_var - p_log_var
    # expm1(d) - d avoids cancellation in exp(d) - 1 - d near d = 0
    return 0.5 * (lib.expm1(d) - d + (q_mean - p_mean) ** 2 * lib.exp(-p_log_var)).sum(-1)


def kl_latents(q: GaussianLatent, p: GaussianLatent) -> float:
    return float(kl_diag_gauss(q.mean, q.log_var, p.mean, p.log_var))


def gaussian_nll(x, mean, log_var):
    """-ln N(x | mean, diag(exp(log_var))), summed over the last axis."""
    return 0.5 * (LOG_2PI + log_var + (x - mean) ** 2 * torch.exp(-log_var)).sum(-1)


def loss(model: MVAE, theta, x, x_noisy, alpha, generator=None, eps=None, kl_check=False):
    """Batch-averaged (total, recon, pred, regul).

    One reparameterized draw per sample and encoder. ``eps`` fixes the draws
    as a pair ``(eps_x, eps_theta)`` of (B, n_z) tensors.
    """
    if len(theta) == 0:
        raise ParameterError("batch must be nonempty")
    mu_x, lv_x = model.x_encoder(x)
    mu_t, lv_t = model.theta_encoder(theta)
    if eps is None:
        eps_x = torch.randn(mu_x.shape, generator=generator, dtype=mu_x.dtype)
        eps_t = torch.randn(mu_t.shape, generator=generator, dtype=mu_t.dtype)
    else:
        eps_x, eps_t = eps
    z_x = mu_x + torch.exp(0.5 * lv_x) * eps_x
    z_t = mu_t + torch.exp(0.5 * lv_t) * eps_t
    b = len(theta)
    dec_mean, dec_lv = model.decoder(torch.cat([z_x, z_t]))
    nll = gaussian_nll(torch.cat([x_noisy, x_noisy]), dec_mean, dec_lv)
    recon = nll[:b].mean()
    pred = nll[b:].mean()
    zeros = torch.zeros_like(mu_x)
    kls = (
        kl_diag_gauss(mu_x, lv_x, zeros, zeros),
        kl_diag_gauss(mu_t, lv_t, zeros, zeros),
        kl_diag_gauss(mu_x, lv_x, mu_t, lv_t),
        kl_diag_gauss(mu_t, lv_t, mu_x, lv_x),
    )
    if kl_check:
        worst = min(float(k.detach().min()) for k in kls)
        if worst < -1e-4:
            raise ArithmeticError(f"negative KL term {worst}")
    regul = (kls[0] + kls[1] + alpha * (kls[2] + kls[3])).mean()
    return LossTerms(recon + pred + regul, recon, pred, regul)


def gradients(model: MVAE, theta, x, x_noisy, alpha, eps):
    """Exact reverse-mode gradients of the single-draw loss with fixed ``eps``.

    Returns a dict parameter-name -> gradient tensor.
    """
    model.zero_grad(set_to_none=True)
    terms = loss(model, theta, x, x_noisy, alpha, eps=eps)
    terms.total.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return grads


@dataclass
class HistoryRow:
    epoch: int
    train_total: float
    train_recon: float
    train_pred: float
    train_regul: float
    val_total: float
    val_recon: float
    val_pred: float
    val_regul: float
    elapsed_s: float = 0.0


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def val_totals(self):
        return np.array([r.val_total for r in self.rows])

    def to_csv(self, path):
        import csv

        names = list(HistoryRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([getattr(r, n) for n in names])


def _evaluate(model, tensors, alpha, batch_size, seed):
    gen = torch.Generator().manual_seed(seed)
    sums = np.zeros(4)
    n = len(tensors[0])
    with torch.no_grad():
        for s in range(0, n, batch_size):
            batch = [t[s:s + batch_size] for t in tensors]
            terms = loss(model, *batch, alpha, generator=gen)
            sums += len(batch[0]) * np.array([float(v) for v in terms])
    return sums / n


def train(model: MVAE, dataset, config: TrainingConfig, progress=None):
    """Adam with shuffled minibatches and early stopping on validation loss.

    Returns ``(best_model, history)``; the input model is left untouched.
    Epoch 0 in the history is the untrained model.
    """
    model = copy.deepcopy(model)
    model.normalization = dataset.normalization()
    dtype = model.dtype
    train_t = [torch.as_tensor(a, dtype=dtype) for a in dataset.partition("train")]
    val_t = [torch.as_tensor(a, dtype=dtype) for a in dataset.partition("val")]
    if len(val_t[0]) == 0:
        raise ParameterError("validation partition is empty")
    rng = np.random.default_rng(config.rng_seed)
    gen = torch.Generator().manual_seed(config.rng_seed)
    val_seed = config.rng_seed + 7919
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    history = TrainingHistory()
    t0 = time.perf_counter()
    tr0 = _evaluate(model, train_t, config.alpha, 1024, val_seed)
    va0 = _evaluate(model, val_t, config.alpha, 1024, val_seed)
    history.rows.append(HistoryRow(0, *tr0, *va0, time.perf_counter() - t0))
    best_val = va0[0]
    best_state = copy.deepcopy(model.state_dict())
    wait = 0
    n = len(train_t[0])
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        perm = torch.as_tensor(rng.permutation(n))
        sums = np.zeros(4)
        for bi, s in enumerate(range(0, n, config.batch_size)):
            idx = perm[s:s + config.batch_size]
            batch = [t[idx] for t in train_t]
            terms = loss(model, *batch, config.alpha, generator=gen, kl_check=True)
            if not torch.isfinite(terms.total):
                bad = [k for k, v in terms._asdict().items() if not torch.isfinite(v)]
                model.load_state_dict(best_state)
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi}, terms {bad}",
                    model=model, history=history,
                )
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            opt.step()
            sums += len(idx) * np.array([float(v.detach()) for v in terms])
        model.eval()
        va = _evaluate(model, val_t, config.alpha, 1024, val_seed)
        row = HistoryRow(epoch, *(sums / n), *va, time.perf_counter() - t0)
        history.rows.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d train %.4f val %.4f", epoch, row.train_total, row.val_total)
        if not np.isfinite(va[0]):
            model.load_state_dict(best_state)
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}",
                                        model=model, history=history)
        if va[0] < best_val:
            best_val = va[0]
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= config.patience_epochs:
                history.stopped_early = True
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def save_model(model: MVAE, path):
    state = model.state_dict()
    meta = {
        "architecture": asdict(model.arch),
        "normalization": model.normalization,
        "parameters": list(state),
    }
    arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in state.items()}
    write_container(path, MODEL_MAGIC, MODEL_VERSION, meta, arrays)


def load_model(path) -> MVAE:
    meta, arrays = read_container(path, MODEL_MAGIC, MODEL_VERSION)
    try:
        arch = MVAEArchitecture(**meta["architecture"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad architecture descriptor") from exc
    model = build_model(arch, meta.get("normalization"))
    state = model.state_dict()
    if list(state) != meta["parameters"]:
        raise FormatError(f"{path}: parameter names do not match architecture")
    new_state = {}
    for name, ref in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(
                f"{path}: shape mismatch for {name}: {arr.shape} vs {tuple(ref.shape)}"
            )
        new_state[name] = torch.from_numpy(arr)
    model.load_state_dict(new_state)
    model.eval()
    model.check_finite()
    return model
