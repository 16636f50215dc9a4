"""Encoder/decoder pair between pixel space and the latent space the
counterfactual search runs in.

The identity codec makes latent space coincide with pixel space (the
default for exact mask tests). The convolutional autoencoder is a small
hourglass with smooth activations so decoding stays differentiable with a
well-behaved gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import LabeledDataset
from .errors import ConfigurationError, ShapeError, TrainingError
from .io import load_container, save_container
from .seeding import derive_seed, torch_generator
from .torchutils import DTYPE, as_tensor, shuffled_batches

CODEC_MAGIC = "CFXAE1"


class IdentityCodec:
    """Codec with encode(x) = x; decoding clamps to the valid pixel range."""

    kind = "identity"
    downsample_factor = 1
    tolerance = 0.0

    def __init__(self, image_shape: tuple[int, int, int]):
        self.image_shape = tuple(image_shape)
        self.latent_shape = tuple(image_shape)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_shape("encode input", x, self.image_shape)
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        _check_shape("decode input", z, self.latent_shape)
        return z.clamp(0.0, 1.0)


def _check_shape(what: str, x: torch.Tensor, expected: tuple[int, ...]) -> None:
    if tuple(x.shape[-3:]) != tuple(expected):
        raise ShapeError(f"{what} shape mismatch", expected=expected, got=tuple(x.shape[-3:]))


@dataclass(frozen=True)
class AutoencoderConfig:
    latent_channels: int = 6
    downsample_factor: int = 2
    hidden: int = 16
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    target_mse: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        levels = math.log2(self.downsample_factor)
        if self.downsample_factor < 2 or levels != int(levels):
            raise ConfigurationError(
                f"downsample_factor must be a power of two >= 2, got {self.downsample_factor}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


class _Hourglass(nn.Module):
    def __init__(self, in_channels: int, hidden: int, latent_channels: int, levels: int):
        super().__init__()
        act = nn.Softplus
        enc: list[nn.Module] = [nn.Conv2d(in_channels, hidden, 3, padding=1), act()]
        for _ in range(levels):
            enc += [nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), act()]
        enc += [nn.Conv2d(hidden, latent_channels, 3, padding=1)]
        dec: list[nn.Module] = [nn.Conv2d(latent_channels, hidden, 3, padding=1), act()]
        for _ in range(levels):
            dec += [nn.ConvTranspose2d(hidden, hidden, 3, stride=2, padding=1, output_padding=1), act()]
        dec += [nn.Conv2d(hidden, in_channels, 3, padding=1), nn.Sigmoid()]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)


class AutoencoderCodec:
    kind = "autoencoder"

    def __init__(self, module: _Hourglass, image_shape: tuple[int, int, int], config: AutoencoderConfig, tolerance: float):
        self.module = module.to(DTYPE)
        self.image_shape = tuple(image_shape)
        self.config = config
        self.tolerance = float(tolerance)
        self.downsample_factor = config.downsample_factor
        c, h, w = image_shape
        self.latent_shape = (config.latent_channels, h // config.downsample_factor, w // config.downsample_factor)
        self.loss_history: list[float] = []

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_shape("encode input", x, self.image_shape)
        return self.module.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        _check_shape("decode input", z, self.latent_shape)
        return self.module.decoder(z)


def fit_autoencoder(train_ds: LabeledDataset, config: AutoencoderConfig, val_ds: LabeledDataset | None = None) -> AutoencoderCodec:
    """Train the hourglass on reconstruction MSE until the validation target or the epoch cap."""
    config.validate()
    if len(train_ds) == 0:
        raise ConfigurationError("autoencoder training requires a non-empty train split")
    image_shape = train_ds.images.shape[1:]
    h, w = image_shape[1:]
    if h % config.downsample_factor or w % config.downsample_factor:
        raise ConfigurationError(
            f"image size {h}x{w} is not divisible by downsample_factor {config.downsample_factor}"
        )

    torch.manual_seed(derive_seed(config.seed, "ae-init"))
    module = _Hourglass(image_shape[0], config.hidden, config.latent_channels, int(math.log2(config.downsample_factor))).to(DTYPE)
    opt = torch.optim.Adam(module.parameters(), lr=config.lr)
    gen = torch_generator(config.seed, "ae-batches")
    x_train = as_tensor(train_ds.images)
    x_val = as_tensor(val_ds.images) if val_ds is not None and len(val_ds) else x_train

    history: list[float] = []
    step = 0
    val_mse = float("inf")
    for _ in range(config.epochs):
        for idx in shuffled_batches(len(train_ds), config.batch_size, gen):
            xb = x_train[idx]
            opt.zero_grad()
            recon = module.decoder(module.encoder(xb))
            loss = torch.mean((recon - xb) ** 2)
            if not torch.isfinite(loss):
                raise TrainingError("autoencoder loss is not finite", step=step)
            loss.backward()
            opt.step()
            history.append(float(loss))
            step += 1
        with torch.no_grad():
            val_mse = float(torch.mean((module.decoder(module.encoder(x_val)) - x_val) ** 2))
        if val_mse <= config.target_mse:
            break

    codec = AutoencoderCodec(module, image_shape, config, tolerance=val_mse)
    codec.loss_history = history
    return codec


def save_codec(codec, path: str | Path) -> None:
    if codec.kind == "identity":
        meta = {"kind": "identity", "image_shape": list(codec.image_shape)}
        save_container(path, CODEC_MAGIC, meta, {})
        return
    meta = {
        "kind": "autoencoder",
        "image_shape": list(codec.image_shape),
        "config": codec.config.to_dict(),
        "tolerance": codec.tolerance,
    }
    arrays = {f"param/{k}": v.detach().numpy() for k, v in codec.module.state_dict().items()}
    save_container(path, CODEC_MAGIC, meta, arrays)


def load_codec(path: str | Path):
    meta, arrays = load_container(path, CODEC_MAGIC)
    if meta["kind"] == "identity":
        return IdentityCodec(tuple(meta["image_shape"]))
    config = AutoencoderConfig(**meta["config"])
    image_shape = tuple(meta["image_shape"])
    module = _Hourglass(image_shape[0], config.hidden, config.latent_channels, int(math.log2(config.downsample_factor)))
    state = {k[len("param/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    module.load_state_dict(state)
    return AutoencoderCodec(module, image_shape, config, tolerance=meta["tolerance"])
