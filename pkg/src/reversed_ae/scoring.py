"""Anomaly maps from (input, pseudo-healthy) pairs.

    score = |eq(x_ph) - eq(x)| * P(x_ph, x) * P(eq(x_ph), eq(x))

where ``eq`` is contrast-limited adaptive histogram equalization and ``P``
is a spatial perceptual-distance map.  All three factors are H x W grids and
are multiplied element-wise; the product is median filtered.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, StateError
from .model import as_batch

RAMP_MAGIC = b"RAMP"
RAMP_VERSION = 1


@dataclass(frozen=True)
class EqualizationConfig:
    tile_grid: tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        object.__setattr__(self, "tile_grid", tuple(int(v) for v in self.tile_grid))
        rows, cols = self.tile_grid
        if rows < 1 or cols < 1:
            raise ConfigError("tile_grid: rows and cols must be >= 1")
        if self.bins < 2:
            raise ConfigError("bins: must be >= 2")
        if not self.clip_limit > 0:
            raise ConfigError("clip_limit: must be > 0 (use inf to disable clipping)")


@dataclass
class AnomalyMap:
    scores: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)

    @property
    def shape(self):
        return self.scores.shape


# ---------------------------------------------------------------------------
# Equalization


def _clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip each row at ``limit`` and spread the excess uniformly, iterating
    until no bin exceeds the limit (excess from refills is re-clipped)."""
    hist = hist.astype(np.float64)
    bins = hist.shape[1]
    for _ in range(64):
        excess = np.clip(hist - limit, 0.0, None).sum(axis=1, keepdims=True)
        if not (excess > 1e-9).any():
            break
        hist = np.minimum(hist, limit) + excess / bins
    return hist


def _tile_edges(n: int, parts: int) -> np.ndarray:
    return np.floor(np.arange(parts + 1) * n / parts).astype(int)


def equalize(x, cfg: EqualizationConfig | None = None) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of one [0, 1] image.

    Each tile's lookup maps bin ``b`` to ``(cdf[b] - cdf_min) / (n - cdf_min)``
    of its clipped histogram.  Constant tiles keep the identity mapping, so a
    constant image is returned unchanged.  Per-pixel outputs are bilinear
    blends of the four nearest tile mappings, clamped at the image border.
    """
    cfg = cfg or EqualizationConfig()
    img = np.asarray(x, dtype=np.float64)
    if img.ndim != 2:
        raise ConfigError(f"equalize expects a 2-D image, got shape {img.shape}")
    h, w = img.shape
    rows, cols = cfg.tile_grid
    if h // rows < 2 or w // cols < 2:
        raise ConfigError(f"tile_grid {cfg.tile_grid} gives tiles smaller than 2x2 on a {h}x{w} image")
    img = np.clip(img, 0.0, 1.0)
    bins = cfg.bins
    q = np.minimum((img * bins).astype(int), bins - 1)

    ey, ex = _tile_edges(h, rows), _tile_edges(w, cols)
    luts = np.zeros((rows, cols, bins))
    constant = np.zeros((rows, cols), dtype=bool)
    for i in range(rows):
        for j in range(cols):
            tile = q[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=bins)[None].astype(np.float64)
            if np.count_nonzero(hist) <= 1:
                constant[i, j] = True
                continue
            if math.isfinite(cfg.clip_limit):
                limit = max(1.0, cfg.clip_limit * n / bins)
                hist = _clip_histogram(hist, limit)
            cdf = np.cumsum(hist[0])
            cdf_min = cdf[np.argmax(hist[0] > 0)]
            luts[i, j] = np.clip((cdf - cdf_min) / (cdf[-1] - cdf_min), 0.0, 1.0)

    def axis_weights(n, parts):
        size = n / parts
        g = (np.arange(n) + 0.5) / size - 0.5
        i0 = np.floor(g).astype(int)
        wgt = g - i0
        return np.clip(i0, 0, parts - 1), np.clip(i0 + 1, 0, parts - 1), wgt

    r0, r1, wy = axis_weights(h, rows)
    c0, c1, wx = axis_weights(w, cols)

    def mapped(ri, ci):
        vals = luts[ri[:, None], ci[None, :], q]
        return np.where(constant[ri[:, None], ci[None, :]], img, vals)

    wy, wx = wy[:, None], wx[None, :]
    out = ((1 - wy) * ((1 - wx) * mapped(r0, c0) + wx * mapped(r0, c1))
           + wy * ((1 - wx) * mapped(r1, c0) + wx * mapped(r1, c1)))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Perceptual distance


class EncoderFeatures:
    """Frozen pyramid of a trained encoder, used as the offline perceptual backend."""

    name = "encoder"

    def __init__(self, model):
        self.model = model

    @torch.no_grad()
    def __call__(self, batch: torch.Tensor):
        pyramid, _ = self.model.encode(batch)
        return pyramid


class TorchvisionFeatures:
    """VGG16 feature taps (relu1_2 .. relu5_3) with unit channel weights.

    Requires the torchvision weights to be cached locally; there is no
    network download fallback.
    """

    name = "vgg16"
    _taps = (3, 8, 15, 22, 29)

    def __init__(self):
        try:
            from torchvision.models import VGG16_Weights, vgg16

            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # noqa: BLE001 - import or weight loading failure
            raise StateError(f"perceptual backend 'vgg16' unavailable: {exc}") from exc
        self.features = net.features[: self._taps[-1] + 1].eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    @torch.no_grad()
    def __call__(self, batch: torch.Tensor):
        h = (batch.float().repeat(1, 3, 1, 1) - self.mean) / self.std
        out = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self._taps:
                out.append(h)
        return out


def make_extractor(backend: str, model=None):
    if backend == "encoder":
        if model is None:
            raise StateError("perceptual backend 'encoder' needs a model")
        return EncoderFeatures(model)
    if backend == "vgg16":
        return TorchvisionFeatures()
    raise ConfigError(f"perceptual_backend: unknown backend {backend!r}")


def _unit_normalize(f: torch.Tensor, eps=1e-10):
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def perceptual_map(a, b, extractor) -> np.ndarray:
    """Spatial perceptual distance map(s), shape (H, W) or (N, H, W)."""
    if extractor is None:
        raise StateError("perceptual_map needs a feature extractor")
    single = np.ndim(a) == 2
    ta, tb = as_batch(torch.as_tensor(np.asarray(a))), as_batch(torch.as_tensor(np.asarray(b)))
    if ta.shape != tb.shape:
        raise ConfigError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    feats = extractor(torch.cat([ta, tb]))
    n = ta.shape[0]
    size = ta.shape[-2:]
    total = torch.zeros(n, 1, *size, dtype=torch.float64)
    for f in feats:
        fa, fb = _unit_normalize(f[:n].double()), _unit_normalize(f[n:].double())
        d = (fa - fb).pow(2).mean(dim=1, keepdim=True)
        if d.shape[-2:] != size:
            d = F.interpolate(d, size=size, mode="bilinear", align_corners=False)
        total += d
    out = total[:, 0].clamp_min(0.0).numpy()
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Anomaly maps


def anomaly_map(x, x_ph, extractor, eq_cfg: EqualizationConfig | None = None,
                median_size: int = 5, provenance: dict | None = None) -> AnomalyMap:
    """Eq(residual) times the raw and equalized perceptual maps, median smoothed."""
    x = np.asarray(x, dtype=np.float64)
    x_ph = np.asarray(x_ph, dtype=np.float64)
    if x.shape != x_ph.shape or x.ndim != 2:
        raise ConfigError(f"anomaly_map needs two equal 2-D images, got {x.shape} and {x_ph.shape}")
    eq_x, eq_ph = equalize(x, eq_cfg), equalize(x_ph, eq_cfg)
    residual = np.abs(eq_ph - eq_x)
    pair = perceptual_map(np.stack([x_ph, eq_ph]), np.stack([x, eq_x]), extractor)
    scores = residual * pair[0] * pair[1]
    if median_size and median_size > 1:
        scores = ndimage.median_filter(scores, size=median_size, mode="reflect")
    return AnomalyMap(np.clip(scores, 0.0, None), dict(provenance or {}))


def image_score(m, top_percent: float = 1.0) -> float:
    """Mean of the top ``top_percent`` % of pixels (at least one pixel)."""
    s = np.asarray(m.scores if isinstance(m, AnomalyMap) else m, dtype=np.float64).ravel()
    if s.size == 0:
        return 0.0
    k = max(1, int(math.ceil(s.size * top_percent / 100.0)))
    return float(np.sort(s)[-k:].mean())


# ---------------------------------------------------------------------------
# Export


def write_raw_map(path, m) -> Path:
    """Little-endian float32 grid behind a 16-byte header: magic, version, H, W."""
    scores = np.asarray(m.scores if isinstance(m, AnomalyMap) else m)
    h, w = scores.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", RAMP_MAGIC, RAMP_VERSION, h, w))
        fh.write(scores.astype("<f4").tobytes())
    return path


def read_raw_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise DataError(f"{path}: truncated anomaly map")
    magic, version, h, w = struct.unpack("<4sIII", data[:16])
    if magic != RAMP_MAGIC or version != RAMP_VERSION:
        raise DataError(f"{path}: not a RAMP v{RAMP_VERSION} file")
    if len(data) != 16 + 4 * h * w:
        raise DataError(f"{path}: payload size does not match {h}x{w}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)


def heatmap_image(m) -> np.ndarray:
    """8-bit rendering: ``round(255 * (s - min) / (max - min))``, all zeros if constant."""
    s = np.asarray(m.scores if isinstance(m, AnomalyMap) else m, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if not hi > lo:
        return np.zeros(s.shape, dtype=np.uint8)
    return np.round((s - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_heatmap(path, m) -> Path:
    Image.fromarray(heatmap_image(m)).save(path)
    return Path(path)


def score_images(model, images, extractor=None, eq_cfg: EqualizationConfig | None = None,
                 median_size: int = 5, batch_size: int = 32):
    """Reconstruct ``images`` (N, H, W) and return ``(x_ph, maps)``.

    ``extractor`` defaults to the model's own frozen encoder pyramid.
    """
    extractor = extractor or EncoderFeatures(model)
    x = as_batch(torch.as_tensor(np.asarray(images, dtype=np.float32)))
    model.eval()
    x_ph = torch.cat([model.reconstruct(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]) \
        if x.shape[0] else x
    x_np = x[:, 0].double().numpy()
    ph_np = x_ph[:, 0].double().numpy()
    maps = [anomaly_map(a, b, extractor, eq_cfg, median_size) for a, b in zip(x_np, ph_np)]
    return ph_np, maps
