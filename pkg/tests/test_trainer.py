import json
import math

import numpy as np
import pytest
import torch

from reversed_ae.checkpoint import load_model, read_checkpoint
from reversed_ae.errors import ConfigError, NonFiniteLossError
from reversed_ae.model import Architecture
from reversed_ae.objectives import ObjectiveConfig
from reversed_ae.trainer import (
    TrainConfig,
    TrainState,
    ablation_mode,
    fit,
    load_state,
    parameter_checksum,
    train_step,
    validate,
)

ARCH = Architecture(image_size=(16, 16), depth=2, base_channels=2, max_channels=8, latent_dim=4)


def _images(n=12, seed=0):
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[:16, :16]
    base = np.exp(-((yy - 8) ** 2 + (xx - 8) ** 2) / 20.0)
    return np.clip(base[None] * r.uniform(0.6, 1.0, (n, 1, 1)) + 0.02 * r.normal(size=(n, 16, 16)), 0, 1)


def _cfg(mode="RA", **kw):
    kw.setdefault("steps", 6)
    kw.setdefault("batch_size", 4)
    return TrainConfig(objective=ObjectiveConfig(mode=mode), **kw)


def _batch():
    return torch.tensor(_images(4), dtype=torch.float32)


def test_train_step_contract():
    cfg = _cfg("VAE")
    state = TrainState.create(cfg, ARCH)
    before = parameter_checksum(state.model)
    state, (enc, dec) = train_step(state, _batch(), cfg)
    assert state.step == 1 and state.model.fitted
    assert parameter_checksum(state.model) != before
    for losses in (enc, dec):
        assert set(losses) == {"recon_term", "kl_term", "elbo", "adversarial_term", "reversed_term", "total"}
        assert all(math.isfinite(v) for v in losses.values())


@pytest.mark.parametrize("mode", ["VAE", "SIVAE", "RA"])
def test_train_step_is_deterministic(mode):
    cfg = _cfg(mode)
    sums = []
    for _ in range(2):
        state = TrainState.create(cfg, ARCH)
        for _ in range(3):
            state, _ = train_step(state, _batch(), cfg)
        sums.append(parameter_checksum(state.model))
    assert sums[0] == sums[1]


def test_half_steps_touch_only_their_own_network(monkeypatch):
    cfg = _cfg("RA")
    state = TrainState.create(cfg, ARCH)
    snapshots = {}

    def wrap(opt, name, other):
        real = opt.step

        def step(*a, **kw):
            before = {k: v.clone() for k, v in getattr(state.model, other).state_dict().items()}
            out = real(*a, **kw)
            after = getattr(state.model, other).state_dict()
            snapshots[name] = all(torch.equal(before[k], after[k]) for k in before)
            return out
        monkeypatch.setattr(opt, "step", step)

    wrap(state.opt_encoder, "encoder", "decoder")
    wrap(state.opt_decoder, "decoder", "encoder")
    state, _ = train_step(state, _batch(), cfg)
    assert snapshots == {"encoder": True, "decoder": True}


def test_encoder_half_step_leaves_no_decoder_gradients():
    cfg = _cfg("RA")
    state = TrainState.create(cfg, ARCH)
    seen = {}
    real = state.opt_encoder.step

    def step(*a, **kw):
        seen["dec_grads"] = [p.grad for p in state.model.decoder.parameters()]
        return real(*a, **kw)

    state.opt_encoder.step = step
    train_step(state, _batch(), cfg)
    assert all(g is None for g in seen["dec_grads"])


def test_non_finite_loss_names_the_term():
    cfg = _cfg("RA")
    state = TrainState.create(cfg, ARCH)
    with torch.no_grad():
        state.model.decoder.out.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train_step(state, _batch(), cfg)
    assert info.value.term in {"recon_term", "kl_term", "elbo", "adversarial_term", "reversed_term", "total"}
    assert info.value.term in str(info.value)
    assert info.value.exit_code == 4


def test_zero_steps_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)


def test_ablation_mode():
    base = _cfg("RA")
    assert ablation_mode(base, "vae").objective.mode == "VAE"
    assert ablation_mode(base, "vae").objective.lambda_reversed == 0
    assert ablation_mode(base, "sivae").objective.mode == "SIVAE"
    assert ablation_mode(base, "ra").objective.lambda_reversed == base.objective.lambda_reversed
    with pytest.raises(ConfigError):
        ablation_mode(base, "gan")


def test_fit_writes_checkpoints_and_log(tmp_path):
    cfg = _cfg("RA", steps=6, validation_every=2, checkpoint_every=3)
    best = fit(cfg, _images(), _images(4, seed=1), tmp_path, arch=ARCH)
    assert best == tmp_path / "best.ckpt" and best.exists() and (tmp_path / "last.ckpt").exists()
    lines = [json.loads(ln) for ln in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == list(range(1, 7))
    assert sum("validation" in r for r in lines) == 3
    header, _ = read_checkpoint(tmp_path / "last.ckpt")
    assert header["extra"]["step"] == 6
    val_scores = [r["validation"]["ssim"] for r in lines if "validation" in r]
    best_header, _ = read_checkpoint(best)
    assert best_header["extra"]["validation"]["ssim"] == max(val_scores)


def test_checkpoint_round_trip_reproduces_validation(tmp_path):
    cfg = _cfg("RA", steps=4, validation_every=4)
    fit(cfg, _images(), _images(4, seed=1), tmp_path, arch=ARCH)
    header, _ = read_checkpoint(tmp_path / "last.ckpt")
    model, _ = load_model(tmp_path / "last.ckpt")
    again = validate(model, torch.tensor(_images(4, seed=1), dtype=torch.float32))
    assert again == pytest.approx(header["extra"]["validation"], abs=1e-6)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = _cfg("RA", steps=6, checkpoint_every=3, validation_every=3)
    fit(cfg, _images(), _images(4, seed=1), tmp_path / "full", arch=ARCH)
    fit(_cfg("RA", steps=3, checkpoint_every=3, validation_every=3), _images(), _images(4, seed=1),
        tmp_path / "part", arch=ARCH)
    fit(cfg, _images(), _images(4, seed=1), tmp_path / "part", arch=ARCH, resume=tmp_path / "part" / "last.ckpt")
    a, _ = load_state(tmp_path / "full" / "last.ckpt", cfg)
    b, _ = load_state(tmp_path / "part" / "last.ckpt", cfg)
    assert parameter_checksum(a.model) == parameter_checksum(b.model)
    assert a.step == b.step == 6
