"""Generative transport backbone.

A single schedule abstraction covers both kinds of model: forward marginals
are z_t = a(t) z0 + b(t) eps with a = 1-t, b = t for rectified flow and
a = sqrt(alpha_bar), b = sqrt(1 - alpha_bar) for the diffusion chain. The
velocity network is trained by flow matching (or noise regression for the
diffusion kind), sampling integrates the reverse dynamics, and
`denoise_estimate` gives the one-step prediction of the clean latent that
the guided search differentiates the classifier at.

Discrete diffusion steps are mapped to continuous time by t = k / T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DomainError, NumericError, TrainingError
from .io import load_container, save_container
from .seeding import derive_seed, torch_generator
from .torchutils import DTYPE, as_tensor, shuffled_batches

GENERATOR_MAGIC = "CFXGEN1"

RECTIFIED_FLOW = "rectified_flow"
DDPM = "ddpm"


@dataclass(frozen=True)
class TrajectorySchedule:
    kind: str
    T: int
    betas: np.ndarray | None = None  # ddpm only, shape (T,)

    def __post_init__(self):
        if self.kind not in (RECTIFIED_FLOW, DDPM):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.T < 1:
            raise ConfigurationError(f"schedule needs T >= 1, got {self.T}")
        if self.kind == DDPM:
            if self.betas is None or self.betas.shape != (self.T,):
                raise ConfigurationError("ddpm schedule needs a betas sequence of length T")
            if np.any(self.betas <= 0) or np.any(self.betas >= 1):
                raise ConfigurationError("betas must lie strictly inside (0, 1)")
            if self.alpha_bars[-1] <= 0:
                raise ConfigurationError("alpha_bar_T must stay positive")
        elif self.betas is not None:
            raise ConfigurationError("rectified flow takes no betas")

    @property
    def alpha_bars(self) -> np.ndarray:
        """alpha_bar indexed 0..T with alpha_bar_0 = 1 (empty product)."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    @classmethod
    def rectified_flow(cls, T: int) -> "TrajectorySchedule":
        return cls(kind=RECTIFIED_FLOW, T=T)

    @classmethod
    def ddpm(cls, T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "TrajectorySchedule":
        return cls(kind=DDPM, T=T, betas=np.linspace(beta_start, beta_end, T, dtype=np.float64))

    def index_of(self, t) -> int:
        """Map a step index (int) or a continuous time in [0, 1] (float) to a step index."""
        if isinstance(t, (int, np.integer)):
            idx = int(t)
        else:
            tf = float(t)
            if not 0.0 <= tf <= 1.0:
                raise DomainError(f"continuous time must lie in [0, 1], got {tf}")
            idx = int(round(tf * self.T))
        if not 0 <= idx <= self.T:
            raise DomainError(f"time index {t!r} outside [0, {self.T}]")
        return idx

    def coef(self, t) -> tuple[float, float]:
        """Return (a, b) with z_t = a z0 + b eps at time t."""
        if self.kind == RECTIFIED_FLOW:
            t = float(t)
            if not 0.0 <= t <= 1.0:
                raise DomainError(f"rectified-flow time must lie in [0, 1], got {t}")
            return 1.0 - t, t
        abar = float(self.alpha_bars[self.index_of(t)])
        return math.sqrt(abar), math.sqrt(1.0 - abar)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "T": self.T}
        if self.kind == DDPM:
            d["betas"] = [float(b) for b in self.betas]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySchedule":
        betas = np.asarray(d["betas"], dtype=np.float64) if d.get("betas") is not None else None
        return cls(kind=d["kind"], T=d["T"], betas=betas)


def interpolate(z0: torch.Tensor, eps: torch.Tensor, t, sched: TrajectorySchedule) -> torch.Tensor:
    """Forward marginal sample a(t) * z0 + b(t) * eps."""
    if z0.shape != eps.shape:
        raise ConfigurationError(f"z0 and eps shapes differ: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    a, b = sched.coef(t)
    return a * z0 + b * eps


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(math.log(1.0), math.log(1000.0), half, dtype=DTYPE))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class VelocityModel(nn.Module):
    """Convolutional field predictor v(z, t) (or predicted noise for the diffusion kind)."""

    def __init__(self, latent_shape: tuple[int, int, int], hidden: int = 32, depth: int = 2, time_dim: int = 32):
        super().__init__()
        c = latent_shape[0]
        self.latent_shape = tuple(latent_shape)
        self.hidden = hidden
        self.depth = depth
        self.time_dim = time_dim
        self.inp = nn.Conv2d(c, hidden, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList(nn.Conv2d(hidden, hidden, 3, padding=1) for _ in range(depth))
        self.out = nn.Conv2d(hidden, c, 3, padding=1)
        self.loss_history: list[float] = []
        self.to(DTYPE)

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        if not isinstance(t, torch.Tensor):
            t = torch.full((z.shape[0],), float(t), dtype=DTYPE)
        emb = self.time_mlp(_sinusoidal_embedding(t.to(DTYPE), self.time_dim))
        h = torch.nn.functional.silu(self.inp(z)) + emb[:, :, None, None]
        for block in self.blocks:
            h = h + torch.nn.functional.silu(block(h))
        return self.out(h)

    def arch_dict(self) -> dict:
        return {
            "latent_shape": list(self.latent_shape),
            "hidden": self.hidden,
            "depth": self.depth,
            "time_dim": self.time_dim,
        }


def _model_time(sched: TrajectorySchedule, t) -> float:
    return float(t) if sched.kind == RECTIFIED_FLOW else sched.index_of(t) / sched.T


def cfm_loss(model, batch: torch.Tensor, sched: TrajectorySchedule, generator: torch.Generator) -> torch.Tensor:
    """Regression loss of the transport field on one batch of clean latents.

    Rectified flow regresses v(z_t, t) onto eps - z0 at uniform t; the
    diffusion kind regresses predicted noise onto eps at a uniform step.
    Mean-per-element reduction.
    """
    if batch.shape[0] == 0:
        raise ConfigurationError("cfm_loss needs a non-empty batch")
    z0 = as_tensor(batch)
    n = z0.shape[0]
    eps = torch.randn(z0.shape, generator=generator, dtype=DTYPE)
    if sched.kind == RECTIFIED_FLOW:
        t = torch.rand(n, generator=generator, dtype=DTYPE)
        tb = t[:, None, None, None]
        z_t = (1.0 - tb) * z0 + tb * eps
        target = eps - z0
    else:
        k = torch.randint(1, sched.T + 1, (n,), generator=generator)
        abar = torch.from_numpy(sched.alpha_bars)[k]
        a = torch.sqrt(abar)[:, None, None, None]
        b = torch.sqrt(1.0 - abar)[:, None, None, None]
        z_t = a * z0 + b * eps
        t = k.to(DTYPE) / sched.T
        target = eps
    pred = model(z_t, t)
    loss = torch.mean((pred - target) ** 2)
    if not torch.isfinite(loss):
        raise NumericError("cfm loss is not finite")
    return loss


@dataclass(frozen=True)
class GeneratorTrainConfig:
    hidden: int = 32
    depth: int = 2
    time_dim: int = 32
    steps: int = 1200
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def train_generator(latents, sched: TrajectorySchedule, config: GeneratorTrainConfig) -> VelocityModel:
    """Fit the velocity model on clean latents; loss history is kept on the model."""
    z0 = as_tensor(latents)
    if z0.ndim != 4 or z0.shape[0] == 0:
        raise ConfigurationError("train_generator expects a non-empty (N, C, H, W) latent array")
    torch.manual_seed(derive_seed(config.seed, "gen-init"))
    model = VelocityModel(tuple(z0.shape[1:]), config.hidden, config.depth, config.time_dim)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch_generator(config.seed, "gen-train")
    n = z0.shape[0]
    for step in range(config.steps):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=gen)
        opt.zero_grad()
        try:
            loss = cfm_loss(model, z0[idx], sched, gen)
        except NumericError as exc:
            raise TrainingError(f"generator training diverged: {exc}", step=step) from exc
        loss.backward()
        opt.step()
        model.loss_history.append(float(loss))
    return model


def sample(model, sched: TrajectorySchedule, n: int, seed_or_generator, latent_shape=None) -> torch.Tensor:
    """Draw n latents by integrating the reverse dynamics from pure noise.

    Rectified flow: Euler steps z <- z - (1/T) v(z, k/T) for k = T..1.
    Diffusion: the ancestral reverse chain with variance beta_t.
    """
    gen = seed_or_generator if isinstance(seed_or_generator, torch.Generator) else torch_generator(int(seed_or_generator), "sample")
    shape = tuple(latent_shape) if latent_shape is not None else tuple(model.latent_shape)
    z = torch.randn((n, *shape), generator=gen, dtype=DTYPE)
    with torch.no_grad():
        for k in range(sched.T, 0, -1):
            z = reverse_step(model, z, k / sched.T, (k - 1) / sched.T, sched, gen)
            if not torch.isfinite(z).all():
                raise NumericError("sampling produced non-finite latents", step=sched.T - k + 1)
    return z


def reverse_step(model, z: torch.Tensor, t_from: float, t_to: float, sched: TrajectorySchedule, generator: torch.Generator | None = None) -> torch.Tensor:
    """One reverse-time transport step from t_from down to t_to."""
    if t_to >= t_from:
        raise DomainError(f"reverse step needs t_to < t_from, got {t_to} >= {t_from}")
    if sched.kind == RECTIFIED_FLOW:
        v = model(z, t_from)
        return z - (t_from - t_to) * v
    k_from, k_to = sched.index_of(t_from), sched.index_of(t_to)
    if k_from != k_to + 1:
        raise DomainError(f"ddpm reverse step must decrement the index by 1, got {k_from} -> {k_to}")
    eps_hat = model(z, k_from / sched.T)
    beta = float(sched.betas[k_from - 1])
    abar = float(sched.alpha_bars[k_from])
    mean = (z - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(1.0 - beta)
    if k_to == 0:
        return mean
    if generator is None:
        raise ConfigurationError("ddpm reverse steps need a generator for the ancestral noise")
    return mean + math.sqrt(beta) * torch.randn(z.shape, generator=generator, dtype=DTYPE)


def denoise_estimate(model, z_t: torch.Tensor, t, sched: TrajectorySchedule) -> torch.Tensor:
    """One-step prediction of the clean latent from the noisy state at time t."""
    if sched.kind == RECTIFIED_FLOW:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"rectified-flow time must lie in [0, 1], got {t}")
        if t == 0.0:
            return z_t.clone()
        return z_t - t * model(z_t, t)
    idx = sched.index_of(t)
    if idx == 0:
        return z_t.clone()
    abar = float(sched.alpha_bars[idx])
    if abar <= 0:
        raise DomainError(f"alpha_bar at index {idx} is not positive")
    eps_hat = model(z_t, idx / sched.T)
    return (z_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def save_generator(model: VelocityModel, sched: TrajectorySchedule, path: str | Path, train_config: GeneratorTrainConfig | None = None) -> None:
    meta = {"schedule": {"kind": sched.kind, "T": sched.T, "has_betas": sched.kind == DDPM}, "arch": model.arch_dict()}
    if train_config is not None:
        meta["train_config"] = train_config.to_dict()
    arrays = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    if sched.kind == DDPM:
        arrays["betas"] = sched.betas
    save_container(path, GENERATOR_MAGIC, meta, arrays)


def load_generator(path: str | Path) -> tuple[VelocityModel, TrajectorySchedule]:
    meta, arrays = load_container(path, GENERATOR_MAGIC)
    sd = meta["schedule"]
    betas = arrays.get("betas")
    sched = TrajectorySchedule(kind=sd["kind"], T=sd["T"], betas=betas)
    arch = meta["arch"]
    model = VelocityModel(tuple(arch["latent_shape"]), arch["hidden"], arch["depth"], arch["time_dim"])
    state = {k[len("param/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    return model, sched
