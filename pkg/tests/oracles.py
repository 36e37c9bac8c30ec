"""Independent reference computations used by the test-suite."""
from collections import deque
from fractions import Fraction

import numpy as np
import torch


def central_difference_check(model, loss_fn, params, n_probes=6, eps=1e-4, seed=0):
    """Compare autograd against central differences on random scalar entries.

    ``loss_fn()`` must be deterministic (re-seed any generator inside).
    Returns a list of (analytic, numeric, relative_error) for probed entries.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    g = torch.Generator().manual_seed(seed)
    results = []
    candidates = [(i, j) for i, p in enumerate(params) for j in range(p.numel())
                  if grads[i] is not None and abs(grads[i].reshape(-1)[j].item()) > 1e-6]
    order = torch.randperm(len(candidates), generator=g)[:n_probes]
    with torch.no_grad():
        for k in order.tolist():
            i, j = candidates[k]
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[i].reshape(-1)[j].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
            results.append((analytic, numeric, rel))
    return results


def brute_auroc(healthy, anomalous):
    total = 0.0
    for a in anomalous:
        for h in healthy:
            total += 1.0 if a > h else 0.5 if a == h else 0.0
    return total / (len(healthy) * len(anomalous))


def brute_sweep(healthy, anomalous):
    """[(threshold, tp, fp)] for every distinct score, descending, rule score >= t."""
    out = []
    for t in sorted(set(healthy) | set(anomalous), reverse=True):
        out.append((t, sum(a >= t for a in anomalous), sum(h >= t for h in healthy)))
    return out


def brute_auprc(healthy, anomalous):
    ap, prev = Fraction(0), Fraction(0)
    for _, tp, fp in brute_sweep(healthy, anomalous):
        recall = Fraction(tp, len(anomalous))
        precision = Fraction(tp, tp + fp)
        ap += (recall - prev) * precision
        prev = recall
    return float(ap)


def brute_fp_at_tp(healthy, anomalous, rate):
    best = None
    for t, tp, fp in brute_sweep(healthy, anomalous):
        if Fraction(tp, len(anomalous)) >= Fraction(rate).limit_denominator(1000):
            if best is None or t > best[0]:
                best = (t, fp)
    return best[1] / len(healthy)


def flood_components(hot):
    """8-connected components by BFS; returns list of pixel sets."""
    h, w = hot.shape
    seen = np.zeros_like(hot, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if hot[y, x] and not seen[y, x]:
                q, comp = deque([(y, x)]), set()
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    comp.add((cy, cx))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < h and 0 <= nx < w and hot[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                q.append((ny, nx))
                comps.append(comp)
    return comps


def enumerate_detection(scores, region_masks, threshold, min_blob=5):
    hot = scores > threshold
    comps = flood_components(hot)
    region_pixels = [set(zip(*np.nonzero(m))) for m in region_masks]
    tp = sum(1 for r in region_pixels if any(p in r for c in comps for p in c))
    all_regions = set().union(*region_pixels) if region_pixels else set()
    fp = sum(1 for c in comps if len(c) >= min_blob and not (c & all_regions))
    return tp, len(region_masks) - tp, fp


def global_hist_eq(img, bins=256):
    """Plain global histogram equalization on the same bin grid."""
    q = np.minimum((img * bins).astype(int), bins - 1)
    values, counts = np.unique(q, return_counts=True)
    cdf = np.cumsum(counts)
    lut = dict(zip(values, (cdf - cdf[0]) / (cdf[-1] - cdf[0])))
    return np.vectorize(lut.get)(q).astype(float)
