"""Convolutional encoder/decoder with multi-scale embedding taps.

The encoder exposes every intermediate activation as a pyramid level so the
reversed embedding loss and the perceptual fallback backend can reuse them.
Level 0 is the stem convolution at full resolution; level ``l`` for
``1 <= l <= depth`` is the output of the ``l``-th stride-2 block.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, StateError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass(frozen=True)
class Architecture:
    """Architecture descriptor, serialized verbatim into checkpoints.

    Defaults are the desk-scale network; :meth:`full_scale` gives the wide one.
    """

    image_size: tuple[int, int] = (64, 64)
    depth: int = 4
    base_channels: int = 8
    max_channels: int = 256
    latent_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if len(self.image_size) != 2:
            raise ConfigError("image_size must be (height, width)")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1 or self.max_channels < 1 or self.latent_dim < 1:
            raise ConfigError("channel counts and latent_dim must be positive")
        step = 2 ** self.depth
        h, w = self.image_size
        if h % step or w % step or h < step or w < step:
            raise ConfigError(
                f"image_size {self.image_size} must be a positive multiple of 2**depth = {step}"
            )

    @classmethod
    def full_scale(cls, image_size=(128, 128)) -> "Architecture":
        return cls(image_size=image_size, depth=4, base_channels=32, latent_dim=128)

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_channels)

    def level_shape(self, level: int) -> tuple[int, int, int]:
        h, w = self.image_size
        return self.channels(level), h // 2 ** level, w // 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


class LatentDistribution(NamedTuple):
    """Diagonal Gaussian posterior; both fields have shape (N, D)."""

    mean: torch.Tensor
    log_variance: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        self.stem = nn.Conv2d(1, arch.channels(0), 3, padding=1)
        self.blocks = nn.ModuleList(
            nn.Conv2d(arch.channels(l - 1), arch.channels(l), 4, stride=2, padding=1)
            for l in range(1, arch.depth + 1)
        )
        c, h, w = arch.level_shape(arch.depth)
        self.head = nn.Linear(c * h * w, 2 * arch.latent_dim)

    def forward(self, x):
        h = F.silu(self.stem(x))
        pyramid = [h]
        for block in self.blocks:
            h = F.silu(block(h))
            pyramid.append(h)
        stats = self.head(h.flatten(1))
        mean, logvar = stats.chunk(2, dim=1)
        return pyramid, LatentDistribution(mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))


class Decoder(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        c, h, w = arch.level_shape(arch.depth)
        self._seed_shape = (c, h, w)
        self.fc = nn.Linear(arch.latent_dim, c * h * w)
        self.blocks = nn.ModuleList(
            nn.Conv2d(arch.channels(l), arch.channels(l - 1), 3, padding=1)
            for l in range(arch.depth, 0, -1)
        )
        self.out = nn.Conv2d(arch.channels(0), 1, 3, padding=1)

    def forward(self, z):
        h = F.silu(self.fc(z)).view(z.shape[0], *self._seed_shape)
        for block in self.blocks:
            h = F.silu(block(F.interpolate(h, scale_factor=2, mode="nearest")))
        return torch.sigmoid(self.out(h))


def as_batch(x) -> torch.Tensor:
    """Coerce an (H, W), (1, H, W) or (N, 1, H, W) array/tensor to (N, 1, H, W)."""
    x = torch.as_tensor(x)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None] if x.shape[0] != 1 else x[None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ConfigError(f"expected single-channel image(s), got shape {tuple(x.shape)}")
    return x


class ReversedAutoEncoder(nn.Module):
    """Encoder/decoder pair.

    ``fitted`` is flipped by the trainer (or checkpoint loading) and guards
    :meth:`reconstruct`, which is only meaningful on a trained model.
    """

    def __init__(self, arch: Architecture | None = None):
        super().__init__()
        self.arch = arch or Architecture()
        self.encoder = Encoder(self.arch)
        self.decoder = Decoder(self.arch)
        self.fitted = False

    @property
    def dtype(self):
        return self.decoder.fc.weight.dtype

    def _check_image(self, x):
        x = as_batch(x).to(self.dtype)
        if tuple(x.shape[-2:]) != self.arch.image_size:
            raise ConfigError(
                f"image shape {tuple(x.shape[-2:])} does not match architecture {self.arch.image_size}"
            )
        return x

    def encode(self, x):
        """Return ``(pyramid, LatentDistribution)`` with ``depth + 1`` pyramid levels."""
        return self.encoder(self._check_image(x))

    def decode(self, z):
        z = torch.as_tensor(z).to(self.dtype)
        if z.ndim == 1:
            z = z[None]
        if z.shape[-1] != self.arch.latent_dim:
            raise ConfigError(f"latent dim {z.shape[-1]} != {self.arch.latent_dim}")
        return self.decoder(z)

    @staticmethod
    def reparameterize(dist: LatentDistribution, generator: torch.Generator | None = None):
        eps = torch.randn(
            dist.mean.shape, generator=generator, dtype=dist.mean.dtype, device=dist.mean.device
        )
        return dist.mean + torch.exp(0.5 * dist.log_variance) * eps

    def sample_latent(self, n: int, generator: torch.Generator | None = None):
        return torch.randn(n, self.arch.latent_dim, generator=generator, dtype=self.dtype)

    @torch.no_grad()
    def reconstruct(self, x):
        """Pseudo-healthy image: decode the posterior mean, no sampling."""
        if not self.fitted:
            raise StateError("reconstruct() requires a trained model; train or load a checkpoint")
        _, dist = self.encode(x)
        return self.decode(dist.mean)

    @torch.no_grad()
    def sample_prior(self, n: int, generator: torch.Generator | None = None):
        if n == 0:
            return []
        return list(self.decode(self.sample_latent(n, generator)))

    def forward(self, x, generator=None):
        pyramid, dist = self.encode(x)
        z = self.reparameterize(dist, generator)
        return self.decode(z), pyramid, dist, z
