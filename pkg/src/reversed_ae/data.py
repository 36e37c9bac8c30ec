"""Image ingestion, manifests, and the synthetic phantom benchmark.

Synthetic data is drawn from :class:`PortableRNG`, a Philox-4x64 counter
generator whose raw 64-bit stream is fixed by the algorithm.  Floats and
normals are derived from the raw words here rather than through numpy's
distribution code, so generated datasets match bit-for-bit across platforms.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".pgm"}
ANOMALY_KINDS = ("bright_blob", "dark_blob", "texture_patch", "structure_deletion", "structure_enlargement")
HEALTHY = "healthy"
SPLITS = ("train", "val", "test")


def num_workers() -> int:
    try:
        cap = int(os.environ.get("RA_NUM_WORKERS", "0"))
    except ValueError:
        raise ConfigError("RA_NUM_WORKERS: must be an integer")
    n = os.cpu_count() or 1
    return max(1, min(n, cap) if cap > 0 else n)


class PortableRNG:
    """Seeded Philox stream; ``stream`` selects an independent substream."""

    def __init__(self, seed: int, stream: int = 0):
        key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, low=0.0, high=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size):
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=(m,))
        u2 = self.uniform(size=(m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return z.reshape(size)

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in ``[low, high)``."""
        return low + min(int(self.uniform() * (high - low)), high - low - 1)

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(0, i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    label: str = HEALTHY
    annotation: str | None = None
    split: str | None = None

    @property
    def name(self) -> str:
        return Path(self.image).stem

    @property
    def is_healthy(self) -> bool:
        return self.label == HEALTHY


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path | None = None
    seed: int | None = None
    split: str | None = None
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def select(self, split: str) -> "DatasetManifest":
        return replace(self, entries=[e for e in self.entries if e.split == split], split=split)

    def path(self, rel: str) -> Path:
        return (self.root / rel) if self.root is not None else Path(rel)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "split": self.split,
            "entries": [asdict(e) for e in self.entries],
            "warnings": list(self.warnings),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read manifest ({exc})") from exc
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"{path}: unsupported manifest schema_version {d.get('schema_version')!r}")
        entries = [ManifestEntry(**e) for e in d["entries"]]
        return cls(entries, root=path.parent, seed=d.get("seed"), split=d.get("split"),
                   warnings=d.get("warnings", []))


# ---------------------------------------------------------------------------
# Image I/O


def read_image(path) -> np.ndarray:
    """Read any single-channel-interpretable image as float64 without rescaling."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
            arr = np.asarray(im, dtype=np.float64)
            if im.mode.startswith("I;16"):
                arr = arr / 65535.0
            return arr
        if im.mode == "1":
            return np.asarray(im, dtype=np.float64)
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_image16(path, img: np.ndarray):
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def normalize(img: np.ndarray, clip_percentiles=(0.0, 100.0)) -> np.ndarray:
    """Per-image min-max to [0, 1]; constant images map to zeros."""
    lo, hi = np.percentile(img, clip_percentiles)
    if not hi > lo:
        return np.zeros_like(img, dtype=np.float64)
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


def resize(img: np.ndarray, size) -> np.ndarray:
    h, w = size
    if img.shape == (h, w):
        return img.astype(np.float64)
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def load_images(manifest: DatasetManifest, dtype=np.float32) -> np.ndarray:
    """Stack all manifest images into an (N, H, W) array."""
    if not manifest.entries:
        return np.zeros((0, 0, 0), dtype=dtype)
    return np.stack([read_image(manifest.path(e.image)) for e in manifest.entries]).astype(dtype)


# ---------------------------------------------------------------------------
# Ingestion and splitting


def _image_files(src: Path):
    files = []
    for p in sorted(src.rglob("*")):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            files.append(p)
    return files


def ingest(src_dir, out_dir, target_size=(128, 128), clip_percentiles=(0.0, 100.0),
           annotations_dir=None, seed: int = 0) -> DatasetManifest:
    """Normalize a directory of images into ``out_dir`` and write its manifest.

    Files in a subdirectory take that subdirectory's name as their class
    label; top-level files are labeled healthy.  Optional annotations are
    looked up in ``annotations_dir`` by stem (``<stem>.png`` mask or
    ``<stem>.json`` box list).  Unreadable files are skipped and listed in
    ``manifest.warnings``.
    """
    src, out = Path(src_dir), Path(out_dir)
    if not src.is_dir():
        raise DataError(f"{src}: not a directory")
    files = _image_files(src)
    if not files:
        raise DataError(f"{src}: no image files found")
    (out / "images").mkdir(parents=True, exist_ok=True)
    ann_dir = Path(annotations_dir) if annotations_dir else None

    def work(p: Path):
        try:
            img = normalize(resize(read_image(p), target_size), clip_percentiles)
        except Exception as exc:  # noqa: BLE001 - any decoder failure is a skip
            return None, f"{p.relative_to(src)}: unreadable ({exc.__class__.__name__}: {exc})"
        rel = p.relative_to(src)
        label = rel.parts[0] if len(rel.parts) > 1 else HEALTHY
        stem = "__".join(rel.with_suffix("").parts)
        write_image16(out / "images" / f"{stem}.png", img)
        annotation = None
        if ann_dir is not None:
            for cand in (ann_dir / f"{p.stem}.png", ann_dir / f"{p.stem}.json"):
                if cand.exists():
                    annotation = os.path.relpath(cand, out)
                    break
        return ManifestEntry(f"images/{stem}.png", label, annotation), None

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        results = list(pool.map(work, files))
    entries, warnings = [], []
    for entry, warn in results:
        if warn:
            log.warning(warn)
            warnings.append(warn)
        else:
            entries.append(entry)
    manifest = DatasetManifest(entries, root=out, seed=seed, warnings=warnings)
    manifest.save(out / "manifest.json")
    return manifest


def split(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic shuffle-then-partition into (train, val, test).

    Anomalous entries that fall into the train partition are moved to test so
    the training split stays healthy-only.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ConfigError(f"fractions: expected three non-negative values summing to 1, got {fractions}")
    n = len(manifest.entries)
    order = PortableRNG(seed, stream=0x5B17).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    shuffled = [manifest.entries[i] for i in order]
    parts = {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }
    parts["test"] = parts["test"] + [e for e in parts["train"] if not e.is_healthy]
    parts["train"] = [e for e in parts["train"] if e.is_healthy]
    return tuple(
        replace(manifest, entries=[replace(e, split=s) for e in parts[s]], split=s, seed=seed)
        for s in SPLITS
    )


def merge(manifests, root=None, seed=None) -> DatasetManifest:
    entries = [e for m in manifests for e in m.entries]
    first = manifests[0]
    return DatasetManifest(entries, root=root or first.root, seed=first.seed if seed is None else seed,
                           warnings=[w for m in manifests for w in m.warnings])


# ---------------------------------------------------------------------------
# Synthetic phantoms


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_healthy: int = 720
    n_val: int = 60
    n_test_healthy: int = 60
    n_anomalous: int = 100
    kinds: tuple[str, ...] = ANOMALY_KINDS
    blob_radius: tuple[float, float] = (3.0, 7.0)
    blob_intensity: tuple[float, float] = (0.3, 0.5)
    texture_radius: tuple[float, float] = (4.0, 8.0)
    texture_amplitude: tuple[float, float] = (0.2, 0.35)
    enlargement_factor: tuple[float, float] = (1.6, 2.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        for name in ("blob_radius", "blob_intensity", "texture_radius", "texture_amplitude",
                     "enlargement_factor"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        for name in ("n_healthy", "n_val", "n_test_healthy", "n_anomalous"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.n_val + self.n_test_healthy > self.n_healthy:
            raise ConfigError("n_val + n_test_healthy: exceeds n_healthy")
        if self.image_size < 16:
            raise ConfigError("image_size: must be >= 16")
        unknown = set(self.kinds) - set(ANOMALY_KINDS)
        if unknown:
            raise ConfigError(f"kinds: unknown anomaly kinds {sorted(unknown)}")
        if self.n_anomalous and not self.kinds:
            raise ConfigError("kinds: empty while n_anomalous > 0")
        for name in ("blob_radius", "texture_radius", "blob_intensity", "texture_amplitude",
                     "enlargement_factor"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name}: expected 0 < low <= high, got {(lo, hi)}")
        for name in ("blob_radius", "texture_radius"):
            if 2 * getattr(self, name)[1] >= self.image_size / 2:
                raise ConfigError(f"{name}: anomaly size exceeds the image bounds")

    @property
    def n_train(self) -> int:
        return self.n_healthy - self.n_val - self.n_test_healthy


# Ellipse structures in normalized coordinates (cx, cy, rx, ry, intensity).
_STRUCTURES = {
    "skull": (0.0, 0.0, 0.86, 0.74, 0.92),
    "brain": (0.0, 0.0, 0.77, 0.65, 0.42),
    "white_matter": (0.0, 0.02, 0.55, 0.44, 0.62),
    "ventricle_left": (-0.15, -0.02, 0.08, 0.22, 0.12),
    "ventricle_right": (0.15, -0.02, 0.08, 0.22, 0.12),
}
_VENTRICLES = ("ventricle_left", "ventricle_right")


@dataclass
class Phantom:
    """Pose and per-structure parameters of one rendered phantom."""

    angle: float
    shift: tuple[float, float]
    scale: float
    structures: dict
    texture: list
    sharpness: float = 40.0

    def render(self, size: int) -> np.ndarray:
        c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
        yy, xx = np.meshgrid(c, c, indexing="ij")
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        xs = (ca * (xx - self.shift[0]) + sa * (yy - self.shift[1])) / self.scale
        ys = (-sa * (xx - self.shift[0]) + ca * (yy - self.shift[1])) / self.scale
        img = np.zeros((size, size))
        for name in _STRUCTURES:
            if name not in self.structures:
                continue
            cx, cy, rx, ry, val = self.structures[name]
            r = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2)
            inside = 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * self.sharpness, -60, 60)))
            if name == "skull":
                img = inside * val
            else:
                img = img * (1 - inside) + inside * val
        brain = self.structures["brain"]
        rb = np.sqrt(((xs - brain[0]) / brain[2]) ** 2 + ((ys - brain[1]) / brain[3]) ** 2)
        tissue = 1.0 / (1.0 + np.exp(np.clip((rb - 1.0) * self.sharpness, -60, 60)))
        tex = np.zeros_like(img)
        for amp, fx, fy, phase in self.texture:
            tex += amp * np.sin(np.pi * (fx * xs + fy * ys) + phase)
        return np.clip(img + tissue * tex, 0.0, 1.0)


def random_phantom(rng: PortableRNG) -> Phantom:
    structures = {}
    for name, (cx, cy, rx, ry, val) in _STRUCTURES.items():
        size_j = rng.uniform(0.9, 1.1) if name in _VENTRICLES else rng.uniform(0.97, 1.03)
        structures[name] = (cx, cy, rx * size_j, ry * size_j, val + rng.uniform(-0.04, 0.04))
    texture = [(rng.uniform(0.005, 0.02), rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, 2 * math.pi))
               for _ in range(3)]
    return Phantom(
        angle=rng.uniform(-0.15, 0.15),
        shift=(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)),
        scale=rng.uniform(0.94, 1.06),
        structures=structures,
        texture=texture,
    )


def _brain_point(ph: Phantom, rng: PortableRNG, size: int, margin_px: float):
    """A pixel location inside the white-matter region, at least ``margin_px`` from the border."""
    cx, cy, rx, ry, _ = ph.structures["white_matter"]
    for _ in range(1000):
        u, v = rng.uniform(-1, 1), rng.uniform(-1, 1)
        if u * u + v * v > 0.7:
            continue
        xs, ys = cx + u * rx, cy + v * ry
        ca, sa = math.cos(ph.angle), math.sin(ph.angle)
        x = ph.scale * (ca * xs - sa * ys) + ph.shift[0]
        y = ph.scale * (sa * xs + ca * ys) + ph.shift[1]
        px, py = (x + 1) / 2 * size - 0.5, (y + 1) / 2 * size - 0.5
        if margin_px <= px <= size - 1 - margin_px and margin_px <= py <= size - 1 - margin_px:
            return py, px
    raise DataError("could not place anomaly inside the phantom")


def inject_anomaly(healthy: np.ndarray, ph: Phantom, kind: str, cfg: SynthConfig, rng: PortableRNG):
    """Return ``(anomalous, mask)``; pixels outside ``mask`` equal ``healthy`` exactly."""
    size = healthy.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind in ("bright_blob", "dark_blob"):
        r = rng.uniform(*cfg.blob_radius)
        cy, cx = _brain_point(ph, rng, size, r + 1)
        d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / r ** 2
        mask = d2 < 1.0
        amp = rng.uniform(*cfg.blob_intensity) * (1 if kind == "bright_blob" else -1)
        bump = np.sqrt(np.clip(1.0 - d2, 0.0, None))
        modified = healthy + amp * bump
    elif kind == "texture_patch":
        r = rng.uniform(*cfg.texture_radius)
        cy, cx = _brain_point(ph, rng, size, r + 1)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < r ** 2
        amp = rng.uniform(*cfg.texture_amplitude)
        checker = np.where((np.floor(yy / 2) + np.floor(xx / 2)) % 2 == 0, 1.0, -1.0)
        noise = rng.normal((size, size))
        modified = healthy + amp * (0.7 * checker + 0.3 * np.clip(noise, -2, 2))
    elif kind in ("structure_deletion", "structure_enlargement"):
        which = _VENTRICLES[rng.integer(0, 2)]
        structures = dict(ph.structures)
        if kind == "structure_deletion":
            del structures[which]
        else:
            cx, cy, rx, ry, val = structures[which]
            f = rng.uniform(*cfg.enlargement_factor)
            structures[which] = (cx, cy, rx * f, ry * f, val)
        modified = replace(ph, structures=structures).render(size)
        mask = np.abs(modified - healthy) > 0.02
    else:
        raise ConfigError(f"kinds: unknown anomaly kind {kind!r}")
    modified = np.clip(modified, 0.0, 1.0)
    mask = mask & (modified != healthy)
    if not mask.any():
        raise DataError(f"{kind}: injected anomaly left the image unchanged")
    return np.where(mask, modified, healthy), mask


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0


def synthesize_sample(cfg: SynthConfig, index: int, kind: str | None):
    """Deterministically build sample ``index``: ``(image, mask or None)``.

    Images are quantized to the 16-bit grid they are stored on, so in-memory
    and on-disk copies agree exactly.
    """
    rng = PortableRNG(cfg.seed, stream=index)
    ph = random_phantom(rng)
    healthy = _quantize(ph.render(cfg.image_size))
    if kind is None:
        return healthy, None
    anomalous, mask = inject_anomaly(healthy, ph, kind, cfg, rng)
    anomalous = _quantize(anomalous)
    return np.where(mask, anomalous, healthy), mask


def _plan(cfg: SynthConfig):
    plan = []
    for i in range(cfg.n_healthy):
        if i < cfg.n_train:
            s = "train"
        elif i < cfg.n_train + cfg.n_val:
            s = "val"
        else:
            s = "test"
        plan.append((f"h{i:05d}", i, None, s))
    for j in range(cfg.n_anomalous):
        kind = cfg.kinds[j % len(cfg.kinds)]
        plan.append((f"a{j:05d}", cfg.n_healthy + j, kind, "test"))
    return plan


def generate_synthetic(cfg: SynthConfig, out_dir=None):
    """Generate the phantom benchmark.

    Returns ``(manifest, images, masks)`` where ``images`` maps entry name to
    array and ``masks`` maps anomalous entry names to boolean masks.  When
    ``out_dir`` is given, images (16-bit PNG), masks (8-bit 0/255 PNG), and
    ``manifest.json`` are written there.
    """
    cfg.validate()
    plan = _plan(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)
        if cfg.n_anomalous:
            (out / "masks").mkdir(parents=True, exist_ok=True)

    def work(item):
        name, index, kind, _ = item
        img, mask = synthesize_sample(cfg, index, kind)
        if out is not None:
            write_image16(out / "images" / f"{name}.png", img)
            if mask is not None:
                write_mask(out / "masks" / f"{name}.png", mask)
        return img, mask

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        results = list(pool.map(work, plan))
    images, masks, entries = {}, {}, []
    for (name, _, kind, s), (img, mask) in zip(plan, results):
        images[name] = img
        if mask is not None:
            masks[name] = mask
        entries.append(ManifestEntry(
            image=f"images/{name}.png",
            label=kind or HEALTHY,
            annotation=f"masks/{name}.png" if mask is not None else None,
            split=s,
        ))
    manifest = DatasetManifest(entries, root=out, seed=cfg.seed)
    if out is not None:
        manifest.save(out / "manifest.json")
    return manifest, images, masks
