"""Training objectives, all written as losses to be minimized.

ELBO terms are kept in their natural (maximization) sign inside
:class:`LossBreakdown`; only ``total`` is a minimization loss.  Batched
inputs are reduced with a mean over the batch after per-sample sums.

The introspective terms operate on ``elbo_scale * ELBO``.  With the default
``elbo_scale=None`` the scale is ``1 / (H * W)``, i.e. per-pixel ELBO, which
keeps ``exp(alpha * ELBO)`` away from underflow on realistic image sizes.
Pass ``elbo_scale=1.0`` for the unscaled objective.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import torch
import torch.nn.functional as F

from .errors import ConfigError

MODES = ("VAE", "SIVAE", "RA")


@dataclass(frozen=True)
class ObjectiveConfig:
    mode: str = "RA"
    alpha: float = 2.0
    gamma: float = 1.0
    lambda_reversed: float = 1.0
    beta_kl: float = 1.0
    sigma_rec: float = 1.0
    elbo_scale: float | None = None
    reversed_mse: str = "mean"
    fake_source: str = "prior"

    def __post_init__(self):
        mode = str(self.mode).upper().replace("-", "")
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ConfigError(f"mode: unknown objective mode {self.mode!r}; expected one of {MODES}")
        if mode != "VAE" and not self.alpha > 0:
            raise ConfigError("alpha: must be > 0 when the adversarial term is enabled")
        for name in ("gamma", "lambda_reversed", "beta_kl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if not self.sigma_rec > 0:
            raise ConfigError("sigma_rec: must be > 0")
        if self.elbo_scale is not None and not self.elbo_scale > 0:
            raise ConfigError("elbo_scale: must be > 0 or null")
        if self.reversed_mse not in ("mean", "sum"):
            raise ConfigError("reversed_mse: expected 'mean' or 'sum'")
        if self.fake_source not in ("prior", "prior+reconstruction"):
            raise ConfigError("fake_source: expected 'prior' or 'prior+reconstruction'")

    @property
    def adversarial(self) -> bool:
        return self.mode != "VAE"

    @property
    def uses_reversed(self) -> bool:
        return self.mode == "RA" and self.lambda_reversed > 0

    def scale_for(self, image_shape) -> float:
        if self.elbo_scale is not None:
            return float(self.elbo_scale)
        h, w = image_shape[-2:]
        return 1.0 / (h * w)

    def replace(self, **kw) -> "ObjectiveConfig":
        return replace(self, **kw)


@dataclass
class LossBreakdown:
    recon_term: torch.Tensor
    kl_term: torch.Tensor
    elbo: torch.Tensor
    adversarial_term: torch.Tensor
    reversed_term: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def first_non_finite(self) -> str | None:
        for f in fields(self):
            if not math.isfinite(float(getattr(self, f.name).detach())):
                return f.name
        return None


def kl_divergence(dist) -> torch.Tensor:
    """Per-sample KL(N(mean, exp(logvar)) || N(0, I)), shape (N,) (or scalar for 1-D input)."""
    mean, logvar = dist
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


def reconstruction_term(x, x_rec, sigma_rec: float = 1.0) -> torch.Tensor:
    """Gaussian log-likelihood surrogate, summed over pixels; one value per sample."""
    x = torch.as_tensor(x)
    x_rec = torch.as_tensor(x_rec)
    if x.shape != x_rec.shape:
        raise ConfigError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    sq = (x - x_rec).pow(2) / sigma_rec ** 2
    if sq.ndim <= 2:
        return -0.5 * sq.sum()
    return -0.5 * sq.flatten(1).sum(dim=1)


def _elbo_parts(x, model, generator, cfg: ObjectiveConfig):
    pyramid, dist = model.encode(x)
    z = model.reparameterize(dist, generator)
    x_rec = model.decode(z)
    rec = reconstruction_term(x, x_rec, cfg.sigma_rec)
    kl = cfg.beta_kl * kl_divergence(dist)
    return rec, kl, x_rec, pyramid


def elbo(x, model, generator=None, cfg: ObjectiveConfig | None = None) -> LossBreakdown:
    """Single-sample ELBO estimate; ``total`` is the batch-mean negative ELBO."""
    cfg = cfg or ObjectiveConfig(mode="VAE")
    rec, kl, _, _ = _elbo_parts(x, model, generator, cfg)
    value = (rec - kl).mean()
    zero = torch.zeros((), dtype=value.dtype)
    return LossBreakdown(rec.mean(), kl.mean(), value, zero, zero, -value)


def reversed_level_terms(a: torch.Tensor, b: torch.Tensor, mse: str = "mean"):
    """Per-sample ``(1 - cos)`` and ``0.5 * MSE`` for one pyramid level.

    Unbatched inputs (any shape without a leading batch) are treated as a
    single sample when ``a.ndim < 2``.
    """
    if a.shape != b.shape:
        raise ConfigError(f"pyramid level shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim < 2:
        a, b = a.reshape(1, -1), b.reshape(1, -1)
    a = a.flatten(1)
    b = b.flatten(1)
    cos = F.cosine_similarity(a, b, dim=1, eps=1e-8)
    sq = (a - b).pow(2)
    err = sq.mean(dim=1) if mse == "mean" else sq.sum(dim=1)
    return 1.0 - cos, 0.5 * err


def reversed_loss(pyramid_x, pyramid_rec, mse: str = "mean") -> torch.Tensor:
    """Multi-scale embedding loss summed over levels, averaged over the batch."""
    if len(pyramid_x) != len(pyramid_rec):
        raise ConfigError(f"pyramid depth mismatch: {len(pyramid_x)} vs {len(pyramid_rec)}")
    total = 0.0
    for a, b in zip(pyramid_x, pyramid_rec):
        cos_part, mse_part = reversed_level_terms(torch.as_tensor(a), torch.as_tensor(b), mse)
        total = total + cos_part + mse_part
    return total.mean()


def _fake_elbo(x_fake, model, generator, cfg):
    _, dist = model.encode(x_fake)
    z = model.reparameterize(dist, generator)
    rec = reconstruction_term(x_fake, model.decode(z), cfg.sigma_rec)
    return rec - cfg.beta_kl * kl_divergence(dist)


def encoder_objective(x, z_fake, cfg: ObjectiveConfig, model, generator=None) -> LossBreakdown:
    """Encoder loss: ``-s*ELBO(x) + (1/alpha) exp(alpha*s*ELBO(D(z_fake))) + lambda*L_rev``.

    The generated image is detached, so the fake path only reaches encoder
    parameters.  The caller is expected to freeze decoder parameters while
    optimizing this loss.
    """
    x = model._check_image(x)
    s = cfg.scale_for(x.shape)
    rec, kl, x_rec, pyramid = _elbo_parts(x, model, generator, cfg)
    real_elbo = (rec - kl).mean()
    zero = torch.zeros((), dtype=real_elbo.dtype)

    adversarial = zero
    if cfg.adversarial:
        fakes = [model.decode(z_fake).detach()]
        if cfg.fake_source == "prior+reconstruction":
            fakes.append(x_rec.detach())
        terms = [
            torch.exp(cfg.alpha * s * _fake_elbo(f, model, generator, cfg)) / cfg.alpha
            for f in fakes
        ]
        adversarial = torch.cat(terms).mean()

    rev = zero
    if cfg.uses_reversed:
        pyramid_rec, _ = model.encode(x_rec)
        rev = reversed_loss(pyramid, pyramid_rec, cfg.reversed_mse)

    total = -s * real_elbo + adversarial + cfg.lambda_reversed * rev
    return LossBreakdown(rec.mean(), kl.mean(), real_elbo, adversarial, rev, total)


def decoder_objective(x, z_fake, cfg: ObjectiveConfig, model, generator=None) -> LossBreakdown:
    """Decoder loss: ``-s*ELBO(x) - gamma*s*ELBO(D(z_fake))``.

    The fake image is re-encoded with gradients flowing back through it to
    the decoder; the caller freezes encoder parameters.
    """
    x = model._check_image(x)
    s = cfg.scale_for(x.shape)
    rec, kl, x_rec, _ = _elbo_parts(x, model, generator, cfg)
    real_elbo = (rec - kl).mean()
    zero = torch.zeros((), dtype=real_elbo.dtype)

    adversarial = zero
    if cfg.adversarial and cfg.gamma > 0:
        fakes = [model.decode(z_fake)]
        if cfg.fake_source == "prior+reconstruction":
            fakes.append(x_rec)
        fake_elbo = torch.cat([_fake_elbo(f, model, generator, cfg) for f in fakes]).mean()
        adversarial = -cfg.gamma * s * fake_elbo

    total = -s * real_elbo + adversarial
    return LossBreakdown(rec.mean(), kl.mean(), real_elbo, adversarial, zero, total)
