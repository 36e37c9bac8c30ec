"""Command line entry point: ``ra synth | train | score | evaluate``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import load_model
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, RAError
from .metrics import Annotation, build_report, calibrate_threshold, detect_regions, ssim
from .model import Architecture
from .scoring import (
    anomaly_map,
    image_score,
    make_extractor,
    perceptual_map,
    read_raw_map,
    write_heatmap,
    write_raw_map,
)
from .trainer import ablation_mode, fit, load_state, parameter_checksum

log = logging.getLogger("reversed_ae")

SCORE_FIELDS = ["name", "image", "label", "score", "ssim", "perceptual", "map", "status"]


def _config(args, overrides=None) -> RunConfig:
    return load_config(getattr(args, "config", None), overrides or {})


def _require(path, what) -> Path:
    if path is None:
        raise ConfigError(f"{what}: no path given")
    return Path(path)


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["synth.seed"] = args.seed
    if args.out is not None:
        overrides["paths.data_root"] = args.out
    cfg = _config(args, overrides)
    out = _require(cfg.paths.data_root, "paths.data_root")
    out.mkdir(parents=True, exist_ok=True)
    manifest, _, _ = data_mod.generate_synthetic(cfg.synth, out)
    cfg.dump(out / "effective_config.yaml")
    counts = {s: len(manifest.select(s)) for s in data_mod.SPLITS}
    print(f"wrote {len(manifest)} images to {out} ({counts})")
    return 0


def _split_images(manifest, split):
    sub = manifest.select(split)
    return data_mod.load_images(sub) if len(sub) else None


def cmd_train(args) -> int:
    overrides = {}
    for flag, key in (("data", "paths.data_root"), ("out", "paths.output_dir"), ("steps", "train.steps"),
                      ("seed", "train.seed")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    cfg = _config(args, overrides)
    tcfg = cfg.train_config()
    if args.mode is not None:
        tcfg = ablation_mode(tcfg, args.mode)
    data_root = _require(cfg.paths.data_root, "paths.data_root")
    out = _require(cfg.paths.output_dir, "paths.output_dir")
    manifest = data_mod.DatasetManifest.load(data_root)
    train = _split_images(manifest, "train")
    if train is None:
        raise DataError(f"{data_root}: manifest has no train entries")
    val = _split_images(manifest, "val")
    m = cfg.model
    arch = Architecture(image_size=train.shape[-2:], depth=m.depth, base_channels=m.base_channels,
                        max_channels=m.max_channels, latent_dim=m.latent_dim)
    out.mkdir(parents=True, exist_ok=True)
    dataclasses.replace(cfg, objective=tcfg.objective, train=tcfg).dump(out / "effective_config.yaml")
    best = fit(tcfg, train, val, out, arch=arch, resume=args.resume)
    state, header = load_state(out / "last.ckpt", tcfg)
    print(f"best checkpoint: {best}")
    print(f"final step {state.step} checksum {parameter_checksum(state.model)}")
    val_metrics = header["extra"].get("validation")
    if val_metrics:
        print(f"final validation: mae {val_metrics['mae']:.6f} ssim {val_metrics['ssim']:.6f}")
    return 0


def _score_inputs(path: Path, split: str):
    """Yield ``(name, image_path, label)`` from a manifest or a plain directory."""
    if path.is_file() or (path / "manifest.json").exists():
        manifest = data_mod.DatasetManifest.load(path)
        sub = manifest.select(split) if split else manifest
        return [(e.name, manifest.path(e.image), e.label) for e in sub.entries]
    if not path.is_dir():
        raise DataError(f"{path}: no such image directory or manifest")
    files = [p for p in sorted(path.iterdir()) if p.suffix.lower() in data_mod.IMAGE_SUFFIXES]
    return [(p.stem, p, "") for p in files]


def _fmt(v):
    return "" if v is None else repr(float(v))


def cmd_score(args) -> int:
    overrides = {}
    if args.checkpoint is not None:
        overrides["paths.checkpoint"] = args.checkpoint
    if args.out is not None:
        overrides["paths.output_dir"] = args.out
    cfg = _config(args, overrides)
    ckpt = _require(cfg.paths.checkpoint, "paths.checkpoint")
    out = _require(cfg.paths.output_dir, "paths.output_dir")
    model, _ = load_model(ckpt)
    extractor = make_extractor(cfg.scoring.perceptual_backend, model)
    inputs = _score_inputs(Path(args.images), args.split)
    for sub in ("recon", "maps", "heatmaps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "effective_config.yaml")
    n_ok = 0
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SCORE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for name, img_path, label in inputs:
            row = {"name": name, "image": str(img_path), "label": label}
            try:
                x = np.clip(data_mod.read_image(img_path), 0.0, 1.0)
                if x.shape != model.arch.image_size:
                    raise ConfigError(f"shape {x.shape} does not match model {model.arch.image_size}")
            except (OSError, ValueError, RAError) as exc:
                log.error("%s: %s", img_path, exc)
                writer.writerow({**row, "status": f"error: {exc}"})
                continue
            x_ph = model.reconstruct(torch.as_tensor(x))[0, 0].double().numpy()
            m = anomaly_map(x, x_ph, extractor, cfg.equalization, cfg.scoring.median_size,
                            provenance={"image": str(img_path), "checkpoint": str(ckpt)})
            data_mod.write_image16(out / "recon" / f"{name}.png", x_ph)
            write_raw_map(out / "maps" / f"{name}.ramp", m)
            write_heatmap(out / "heatmaps" / f"{name}.png", m)
            writer.writerow({
                **row,
                "score": _fmt(image_score(m, cfg.scoring.top_percent)),
                "ssim": _fmt(ssim(x, x_ph)),
                "perceptual": _fmt(perceptual_map(x, x_ph, extractor).mean()),
                "map": f"maps/{name}.ramp",
                "status": "ok",
            })
            n_ok += 1
    print(f"scored {n_ok}/{len(inputs)} images into {out}")
    return 0


def _load_annotation(manifest, entry, shape) -> Annotation:
    if entry.annotation is None:
        return Annotation([])
    path = manifest.path(entry.annotation)
    if path.suffix.lower() == ".json":
        return Annotation.from_json(path)
    try:
        mask = data_mod.read_mask(path)
    except OSError as exc:
        raise DataError(f"{path}: cannot read annotation mask ({exc})") from exc
    if mask.shape != tuple(shape):
        raise DataError(f"{path}: mask shape {mask.shape} != map shape {tuple(shape)}")
    return Annotation.from_mask(mask, label=entry.label)


def cmd_evaluate(args) -> int:
    cfg = _config(args, {"evaluation.percentile": args.percentile} if args.percentile is not None else {})
    scores_dir = Path(args.scores)
    csv_path = scores_dir / "scores.csv"
    try:
        with open(csv_path, newline="") as fh:
            rows = {r["name"]: r for r in csv.DictReader(fh) if r["status"] == "ok"}
    except OSError as exc:
        raise DataError(f"{csv_path}: cannot read scores ({exc})") from exc
    manifest = data_mod.DatasetManifest.load(args.manifest)
    entries = manifest.select(args.split).entries if args.split else manifest.entries
    missing = [e.name for e in entries if e.name not in rows]
    if missing:
        raise DataError(f"missing score for manifest entry '{missing[0]}' ({len(missing)} missing)")
    maps = {e.name: read_raw_map(scores_dir / rows[e.name]["map"]) for e in entries}
    threshold = cfg.evaluation.threshold
    healthy_maps = [maps[e.name] for e in entries if e.is_healthy]
    has_anomalous = any(not e.is_healthy for e in entries)
    if threshold is None and has_anomalous:
        if not healthy_maps:
            raise ConfigError("evaluation.threshold: no healthy maps to calibrate from; set it explicitly")
        threshold = calibrate_threshold(healthy_maps, cfg.evaluation.percentile)
    records = []
    for e in entries:
        m = maps[e.name]
        r = rows[e.name]
        rec = {"name": e.name, "label": e.label, "score": float(r["score"]), "outcome": None}
        if threshold is not None:
            rec["outcome"] = detect_regions(m, _load_annotation(manifest, e, m.shape), threshold,
                                            cfg.evaluation.min_blob_size)
        if e.is_healthy:
            rec["ssim"] = float(r["ssim"])
            rec["perceptual"] = float(r["perceptual"])
        records.append(rec)
    report = build_report(records, threshold)
    out = Path(args.out) if args.out else scores_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "per_image.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "label", "score", "tp", "fn", "fp"])
        for rec in records:
            o = rec["outcome"]
            w.writerow([rec["name"], rec["label"], repr(rec["score"]),
                        *(("", "", "") if o is None else
                          (o.true_positive_regions, o.false_negative_regions, o.false_positive_blobs))])
    summary = report.to_dict()
    if report.total is not None:
        t = report.total
        print(f"#det {t.detected}/{t.annotated}  recall {t.recall:.4f}  F1 {t.f1:.4f}  AUROC {t.auroc}")
    print(f"healthy SSIM {summary['reconstruction']['ssim']}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ra", description="Reversed auto-encoder anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic phantom benchmark")
    s.add_argument("--config")
    s.add_argument("--out", help="dataset directory (overrides paths.data_root)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on the healthy train split")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory with manifest.json")
    t.add_argument("--out", help="run directory for checkpoints and logs")
    t.add_argument("--mode", choices=["vae", "sivae", "ra"], type=str.lower)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("score", help="write pseudo-healthy images and anomaly maps")
    c.add_argument("--config")
    c.add_argument("--checkpoint")
    c.add_argument("--images", required=True, help="image directory or dataset manifest")
    c.add_argument("--split", default="test", help="manifest split to score ('' for all)")
    c.add_argument("--out")
    c.set_defaults(func=cmd_score)

    e = sub.add_parser("evaluate", help="compute the evaluation report from scored maps")
    e.add_argument("--config")
    e.add_argument("--scores", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--percentile", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(data_mod.num_workers())
    try:
        return args.func(args)
    except RAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
