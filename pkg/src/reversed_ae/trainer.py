"""Alternating encoder/decoder training with checkpointing and resume."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .errors import ConfigError, DataError, NonFiniteLossError
from .metrics import ssim
from .model import Architecture, ReversedAutoEncoder, as_batch
from .objectives import MODES, LossBreakdown, ObjectiveConfig, decoder_objective, encoder_objective

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    steps: int = 2000
    batch_size: int = 16
    learning_rate_encoder: float = 2e-4
    learning_rate_decoder: float = 2e-4
    seed: int = 0
    checkpoint_every: int = 500
    validation_every: int = 250
    lambda_warmup: float = 0.0  # fraction of steps for a linear lambda ramp; 0 disables

    def __post_init__(self):
        if isinstance(self.objective, dict):
            object.__setattr__(self, "objective", ObjectiveConfig(**self.objective))
        if self.steps <= 0:
            raise ConfigError("steps: must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        for name in ("learning_rate_encoder", "learning_rate_decoder"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be > 0")
        if self.checkpoint_every < 1 or self.validation_every < 1:
            raise ConfigError("checkpoint_every/validation_every: must be >= 1")
        if not 0 <= self.lambda_warmup <= 1:
            raise ConfigError("lambda_warmup: must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def ablation_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    """VAE drops the adversarial and reversed terms, SIVAE drops the reversed term."""
    mode = str(mode).upper().replace("-", "")
    if mode not in MODES:
        raise ConfigError(f"mode: unknown ablation mode {mode!r}")
    obj = cfg.objective.replace(mode=mode)
    if mode in ("VAE", "SIVAE"):
        obj = obj.replace(lambda_reversed=0.0)
    return replace(cfg, objective=obj)


@dataclass
class TrainState:
    model: ReversedAutoEncoder
    opt_encoder: torch.optim.Optimizer
    opt_decoder: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    best_score: float | None = None
    best_step: int | None = None

    @classmethod
    def create(cls, cfg: TrainConfig, arch: Architecture | None = None) -> "TrainState":
        torch.manual_seed(cfg.seed)
        model = ReversedAutoEncoder(arch or Architecture())
        gen = torch.Generator().manual_seed(cfg.seed)
        return cls(
            model,
            torch.optim.Adam(model.encoder.parameters(), lr=cfg.learning_rate_encoder),
            torch.optim.Adam(model.decoder.parameters(), lr=cfg.learning_rate_decoder),
            gen,
        )


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _check(b: LossBreakdown, step, phase):
    bad = b.first_non_finite()
    if bad:
        raise NonFiniteLossError(bad, step=step, phase=phase)


def _effective_objective(cfg: TrainConfig, step: int) -> ObjectiveConfig:
    obj = cfg.objective
    if cfg.lambda_warmup > 0 and obj.uses_reversed:
        ramp = min(1.0, step / (cfg.lambda_warmup * cfg.steps))
        obj = obj.replace(lambda_reversed=obj.lambda_reversed * ramp)
    return obj


def train_step(state: TrainState, batch, cfg: TrainConfig):
    """One encoder update followed by one decoder update, fresh fakes for each."""
    x = as_batch(batch).to(state.model.dtype)
    if x.shape[0] == 0:
        raise ConfigError("train_step needs a non-empty batch")
    model, gen = state.model, state.generator
    obj = _effective_objective(cfg, state.step)
    n = x.shape[0]
    model.train()

    model.decoder.requires_grad_(False)
    try:
        z_fake = model.sample_latent(n, gen)
        enc = encoder_objective(x, z_fake, obj, model, gen)
        _check(enc, state.step, "encoder")
        state.opt_encoder.zero_grad(set_to_none=True)
        enc.total.backward()
        state.opt_encoder.step()
    finally:
        model.decoder.requires_grad_(True)

    model.encoder.requires_grad_(False)
    try:
        z_fake = model.sample_latent(n, gen)
        dec = decoder_objective(x, z_fake, obj, model, gen)
        _check(dec, state.step, "decoder")
        state.opt_decoder.zero_grad(set_to_none=True)
        dec.total.backward()
        state.opt_decoder.step()
    finally:
        model.encoder.requires_grad_(True)

    state.step += 1
    model.fitted = True
    return state, (enc.as_floats(), dec.as_floats())


@torch.no_grad()
def validate(model: ReversedAutoEncoder, images, batch_size: int = 64) -> dict:
    """Mean absolute residual and SSIM between images and their reconstructions."""
    images = as_batch(images).to(model.dtype)
    model.eval()
    fitted = model.fitted
    model.fitted = True
    try:
        rec = torch.cat([model.reconstruct(images[i:i + batch_size])
                         for i in range(0, images.shape[0], batch_size)])
    finally:
        model.fitted = fitted
    x = images[:, 0].double().numpy()
    r = rec[:, 0].double().numpy()
    return {
        "mae": float(np.abs(x - r).mean()),
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(x, r)])),
    }


# ---------------------------------------------------------------------------
# Checkpointing of the full training state


def _optimizer_tensors(prefix, opt):
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            if k != "step":
                out[f"{prefix}/{idx}/{k}"] = ("float32", v.detach().cpu().float().numpy())
    return out


def _optimizer_steps(opt):
    return {str(i): float(st["step"]) for i, st in opt.state_dict()["state"].items()}


def save_state(path, state: TrainState, cfg: TrainConfig, extra=None):
    tensors = {}
    tensors.update(_optimizer_tensors("opt_encoder", state.opt_encoder))
    tensors.update(_optimizer_tensors("opt_decoder", state.opt_decoder))
    tensors["rng/generator"] = ("uint8", state.generator.get_state().numpy())
    meta = {
        "step": state.step,
        "best_score": state.best_score,
        "best_step": state.best_step,
        "opt_encoder_steps": _optimizer_steps(state.opt_encoder),
        "opt_decoder_steps": _optimizer_steps(state.opt_decoder),
    }
    meta.update(extra or {})
    return ckpt.save_checkpoint(path, state.model, config=cfg.to_dict(), seed=cfg.seed,
                                extra=meta, extra_tensors=tensors)


def _restore_optimizer(opt, prefix, tensors, steps):
    sd = opt.state_dict()
    for idx in list(sd["param_groups"][0]["params"]):
        key = str(idx)
        if key not in steps:
            continue
        sd["state"][idx] = {
            "step": torch.tensor(steps[key]),
            "exp_avg": torch.from_numpy(tensors[f"{prefix}/{idx}/exp_avg"]),
            "exp_avg_sq": torch.from_numpy(tensors[f"{prefix}/{idx}/exp_avg_sq"]),
        }
    opt.load_state_dict(sd)


def load_state(path, cfg: TrainConfig | None = None) -> tuple[TrainState, dict]:
    header, tensors = ckpt.read_checkpoint(path)
    if cfg is None:
        cfg = TrainConfig(**header["config"])
    state = TrainState.create(cfg, Architecture.from_dict(header["architecture"]))
    params = {k[len("model/"):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model/")}
    state.model.load_state_dict(params)
    state.model.fitted = header.get("fitted", True)
    meta = header["extra"]
    _restore_optimizer(state.opt_encoder, "opt_encoder", tensors, meta.get("opt_encoder_steps", {}))
    _restore_optimizer(state.opt_decoder, "opt_decoder", tensors, meta.get("opt_decoder_steps", {}))
    if "rng/generator" in tensors:
        state.generator.set_state(torch.from_numpy(tensors["rng/generator"]))
    state.step = int(meta.get("step", 0))
    state.best_score = meta.get("best_score")
    state.best_step = meta.get("best_step")
    return state, header


# ---------------------------------------------------------------------------


def _truncate_log(path: Path, step: int):
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln).get("step", 0) <= step]
    path.write_text("".join(ln + "\n" for ln in keep))


@contextlib.contextmanager
def flush_denormals():
    # Near-zero per-sample exp terms push whole backward passes into subnormal
    # floats, which run 2-3x slower on CPU; flushing them is deterministic.
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def fit(cfg: TrainConfig, train_set, val_set, out_dir, arch: Architecture | None = None,
        resume=None, progress=None) -> Path:
    """Train for ``cfg.steps`` steps; returns the path of the best checkpoint.

    ``train_set`` / ``val_set`` are (N, H, W) arrays of healthy images.
    Writes ``last.ckpt``, ``best.ckpt`` and ``train_log.jsonl`` (one record
    per step) into ``out_dir``.  ``resume`` continues from a saved state.
    """
    train = as_batch(np.asarray(train_set, dtype=np.float32))
    val = as_batch(np.asarray(val_set, dtype=np.float32)) if val_set is not None and len(val_set) else None
    if train.shape[0] == 0:
        raise DataError("fit: empty training set")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: cannot create output directory ({exc})") from exc
    arch = arch or Architecture(image_size=tuple(train.shape[-2:]))
    if resume is not None:
        state, _ = load_state(resume, cfg)
        if state.model.arch != arch:
            raise ConfigError(f"resume: checkpoint architecture {state.model.arch} != {arch}")
    else:
        state = TrainState.create(cfg, arch)
    if tuple(train.shape[-2:]) != arch.image_size:
        raise ConfigError(f"training images {tuple(train.shape[-2:])} do not match {arch.image_size}")

    log_path = out / "train_log.jsonl"
    if resume is not None:
        _truncate_log(log_path, state.step)
    elif log_path.exists():
        log_path.unlink()
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"
    n = train.shape[0]
    with open(log_path, "a") as log_fh, flush_denormals():
        while state.step < cfg.steps:
            idx = torch.randint(n, (cfg.batch_size,), generator=state.generator)
            t0 = time.perf_counter()
            state, (enc, dec) = train_step(state, train[idx], cfg)
            record = {"step": state.step, "encoder": enc, "decoder": dec,
                      "wall_time": time.perf_counter() - t0}
            step = state.step
            if val is not None and (step % cfg.validation_every == 0 or step == cfg.steps):
                metrics = validate(state.model, val)
                record["validation"] = metrics
                if state.best_score is None or metrics["ssim"] > state.best_score:
                    state.best_score, state.best_step = metrics["ssim"], step
                    save_state(best_path, state, cfg, extra={"validation": metrics})
                log.info("step %d val mae %.4f ssim %.4f", step, metrics["mae"], metrics["ssim"])
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                save_state(last_path, state, cfg, extra=(
                    {"validation": record["validation"]} if "validation" in record else None))
            if progress is not None:
                progress(step, record)
    if not best_path.exists():
        save_state(best_path, state, cfg)
    return best_path
