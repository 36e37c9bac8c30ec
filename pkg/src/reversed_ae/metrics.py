"""Evaluation protocol: region detection counts, F1, curve metrics, SSIM."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Region:
    """Binary mask or ``(x, y, w, h)`` box, with a class label."""

    mask: np.ndarray | None = None
    box: tuple[int, int, int, int] | None = None
    label: str = "anomaly"

    def to_mask(self, shape) -> np.ndarray:
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != tuple(shape):
                raise ConfigError(f"region mask shape {m.shape} != map shape {tuple(shape)}")
            return m
        x, y, w, h = self.box
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > shape[1] or y + h > shape[0]:
            raise ConfigError(f"box {self.box} outside image bounds {tuple(shape)} or empty")
        m = np.zeros(shape, dtype=bool)
        m[y:y + h, x:x + w] = True
        return m


@dataclass
class Annotation:
    regions: list[Region] = field(default_factory=list)

    @classmethod
    def from_mask(cls, mask, label="anomaly", split_components=False) -> "Annotation":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return cls([])
        if not split_components:
            return cls([Region(mask=mask, label=label)])
        lab, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        return cls([Region(mask=lab == i, label=label) for i in range(1, n + 1)])

    @classmethod
    def from_json(cls, path) -> "Annotation":
        """Box list: ``[{"box": [x, y, w, h], "label": "..."}, ...]``."""
        try:
            items = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read box annotation ({exc})") from exc
        return cls([Region(box=tuple(int(v) for v in it["box"]), label=it.get("label", "anomaly"))
                    for it in items])


@dataclass(frozen=True)
class DetectionOutcome:
    true_positive_regions: int = 0
    false_negative_regions: int = 0
    false_positive_blobs: int = 0


def detect_regions(m, ann: Annotation, threshold: float, min_blob_size: int = 5) -> DetectionOutcome:
    """Region-level detection on a binarized map (``score > threshold``).

    A region is detected if any hot pixel lies inside it.  Each 8-connected
    hot component of at least ``min_blob_size`` pixels that touches no region
    is one false positive.
    """
    if not np.isfinite(threshold):
        raise ConfigError("threshold: must be finite")
    scores = np.asarray(getattr(m, "scores", m), dtype=np.float64)
    hot = scores > threshold
    regions = [r.to_mask(scores.shape) for r in ann.regions]
    tp = sum(bool((hot & r).any()) for r in regions)
    covered = np.zeros(scores.shape, dtype=bool)
    for r in regions:
        covered |= r
    lab, n = ndimage.label(hot, structure=EIGHT_CONNECTED)
    fp = 0
    if n:
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        touching = np.zeros(n + 1, dtype=bool)
        touching[np.unique(lab[covered & hot])] = True
        fp = int(sum(1 for i in range(1, n + 1) if sizes[i] >= min_blob_size and not touching[i]))
    return DetectionOutcome(tp, len(regions) - tp, fp)


def _ratio(a, b):
    return a / b if b else 0.0


def f1_from_outcomes(outcomes) -> tuple[float, float, float]:
    """Pooled (recall, precision, F1); every 0/0 is 0."""
    tp = sum(o.true_positive_regions for o in outcomes)
    fn = sum(o.false_negative_regions for o in outcomes)
    fp = sum(o.false_positive_blobs for o in outcomes)
    recall = _ratio(tp, tp + fn)
    precision = _ratio(tp, tp + fp)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return recall, precision, f1


def calibrate_threshold(healthy_maps, percentile: float = 98.0) -> float:
    if not 0 < percentile < 100:
        raise ConfigError("percentile: must lie in (0, 100)")
    maps = [np.asarray(getattr(m, "scores", m), dtype=np.float64).ravel() for m in healthy_maps]
    if not maps:
        raise ConfigError("calibrate_threshold needs at least one healthy map")
    return float(np.percentile(np.concatenate(maps), percentile))


def _scores(healthy, anomalous):
    h = np.asarray(healthy, dtype=np.float64).ravel()
    a = np.asarray(anomalous, dtype=np.float64).ravel()
    if h.size == 0 or a.size == 0:
        raise ConfigError("both healthy and anomalous score lists must be non-empty")
    return h, a


def auroc(healthy_scores, anomalous_scores) -> float:
    """Mann-Whitney AUROC with ties counted as one half."""
    h, a = _scores(healthy_scores, anomalous_scores)
    hs = np.sort(h)
    below = np.searchsorted(hs, a, side="left")
    not_above = np.searchsorted(hs, a, side="right")
    u2 = (below + not_above).sum()  # twice the U statistic, an exact integer
    return float(u2) / (2.0 * h.size * a.size)


def _operating_points(h, a):
    """(threshold, tp, fp) for every distinct score, thresholds descending, rule ``score >= t``."""
    thresholds = np.unique(np.concatenate([h, a]))[::-1]
    hs, as_ = np.sort(h), np.sort(a)
    tp = as_.size - np.searchsorted(as_, thresholds, side="left")
    fp = hs.size - np.searchsorted(hs, thresholds, side="left")
    return thresholds, tp, fp


def auprc(healthy_scores, anomalous_scores) -> float:
    """Average precision: sum over thresholds of (recall step) * precision."""
    h, a = _scores(healthy_scores, anomalous_scores)
    _, tp, fp = _operating_points(h, a)
    precision = tp / (tp + fp)
    recall = tp / a.size
    prev = np.concatenate([[0.0], recall[:-1]])
    return math.fsum(((recall - prev) * precision).tolist())


def fp_at_tp(healthy_scores, anomalous_scores, tp_rate: float = 0.95) -> float:
    """False-positive rate at the strictest threshold whose sensitivity is ``>= tp_rate``."""
    if not 0 < tp_rate <= 1:
        raise ConfigError("tp_rate: must lie in (0, 1]")
    h, a = _scores(healthy_scores, anomalous_scores)
    _, tp, fp = _operating_points(h, a)
    ok = tp >= tp_rate * a.size - 1e-9
    i = int(np.argmax(ok))
    return float(fp[i] / h.size)


def _gaussian_window(size=11, sigma=1.5):
    r = (size - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-windowed SSIM averaged over windows fully inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    k = _gaussian_window(win_size, sigma)

    def blur(img):
        out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
        return ndimage.correlate1d(out, k, axis=1, mode="reflect")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    pad = (win_size - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


# ---------------------------------------------------------------------------
# Report


@dataclass
class ClassMetrics:
    n_images: int
    detected: int
    annotated: int
    recall: float
    precision: float
    f1: float
    auroc: float | None = None
    auprc: float | None = None
    fp_at_tp95: float | None = None
    fp_at_tp99: float | None = None


@dataclass
class EvalReport:
    threshold: float | None
    per_class: dict[str, ClassMetrics]
    total: ClassMetrics | None
    healthy_ssim: float | None
    healthy_perceptual: float | None
    n_healthy: int

    def to_dict(self) -> dict:
        def cm(c):
            return None if c is None else {k: v for k, v in c.__dict__.items()}

        out = {
            "n_healthy": self.n_healthy,
            "reconstruction": {"ssim": self.healthy_ssim, "perceptual": self.healthy_perceptual},
        }
        if self.total is not None:
            out["threshold"] = self.threshold
            out["total"] = cm(self.total)
            out["per_class"] = {k: cm(v) for k, v in sorted(self.per_class.items())}
        return out


def class_metrics(outcomes, healthy_scores, anomalous_scores) -> ClassMetrics:
    recall, precision, f1 = f1_from_outcomes(outcomes)
    tp = sum(o.true_positive_regions for o in outcomes)
    n_regions = tp + sum(o.false_negative_regions for o in outcomes)
    c = ClassMetrics(len(anomalous_scores), tp, n_regions, recall, precision, f1)
    if len(healthy_scores) and len(anomalous_scores):
        c.auroc = auroc(healthy_scores, anomalous_scores)
        c.auprc = auprc(healthy_scores, anomalous_scores)
        c.fp_at_tp95 = fp_at_tp(healthy_scores, anomalous_scores, 0.95)
        c.fp_at_tp99 = fp_at_tp(healthy_scores, anomalous_scores, 0.99)
    return c


def build_report(records, threshold) -> EvalReport:
    """Aggregate per-image records.

    Each record is a dict with ``label``, ``score``, ``outcome`` (a
    :class:`DetectionOutcome` or None for healthy images), and for healthy
    images ``ssim`` and ``perceptual``.
    """
    healthy = [r for r in records if r["label"] == "healthy"]
    anomalous = [r for r in records if r["label"] != "healthy"]
    h_scores = [r["score"] for r in healthy]
    per_class = {}
    for label in sorted({r["label"] for r in anomalous}):
        rs = [r for r in anomalous if r["label"] == label]
        # false positives on healthy images are not attributed to a single class
        per_class[label] = class_metrics([r["outcome"] for r in rs], h_scores, [r["score"] for r in rs])
    total = None
    if anomalous:
        outcomes = [r["outcome"] for r in records if r.get("outcome") is not None]
        total = class_metrics(outcomes, h_scores, [r["score"] for r in anomalous])
    mean = lambda key: float(np.mean([r[key] for r in healthy])) if healthy else None  # noqa: E731
    return EvalReport(
        threshold=threshold if anomalous else None,
        per_class=per_class,
        total=total,
        healthy_ssim=mean("ssim"),
        healthy_perceptual=mean("perceptual"),
        n_healthy=len(healthy),
    )
