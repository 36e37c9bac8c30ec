import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import global_hist_eq
from reversed_ae import scoring
from reversed_ae.errors import ConfigError, DataError, StateError
from reversed_ae.scoring import (
    AnomalyMap,
    EncoderFeatures,
    EqualizationConfig,
    anomaly_map,
    equalize,
    heatmap_image,
    image_score,
    make_extractor,
    perceptual_map,
    read_raw_map,
    score_images,
    write_heatmap,
    write_raw_map,
)


@pytest.fixture
def extractor(small_model):
    return EncoderFeatures(small_model)


def _pair(seed, size=32):
    r = np.random.default_rng(seed)
    x = r.uniform(size=(size, size))
    return x, np.clip(x + r.normal(scale=0.1, size=x.shape), 0, 1)


def test_equalize_constant_image_unchanged():
    x = np.full((32, 32), 0.37)
    assert np.array_equal(equalize(x), x)


def test_equalize_single_tile_matches_global_equalization():
    x = np.tile(np.linspace(0, 1, 64), (64, 1)) ** 2
    cfg = EqualizationConfig(tile_grid=(1, 1), clip_limit=float("inf"))
    assert np.max(np.abs(equalize(x, cfg) - global_hist_eq(x))) <= 1 / 256


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(2, 2), (4, 4), (8, 8)]), st.floats(0.5, 8))
def test_equalize_range_and_shape(seed, grid, clip):
    x = np.random.default_rng(seed).uniform(size=(32, 32))
    y = equalize(x, EqualizationConfig(tile_grid=grid, clip_limit=clip))
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1


def test_equalize_clip_limit_tempers_contrast():
    r = np.random.default_rng(0)
    x = np.clip(0.5 + 0.02 * r.normal(size=(32, 32)), 0, 1)
    strong = equalize(x, EqualizationConfig(tile_grid=(1, 1), clip_limit=float("inf")))
    mild = equalize(x, EqualizationConfig(tile_grid=(1, 1), clip_limit=1.0))
    assert mild.std() < strong.std()


def test_equalize_rejects_degenerate_tiles():
    with pytest.raises(ConfigError):
        equalize(np.zeros((8, 8)), EqualizationConfig(tile_grid=(8, 8)))
    with pytest.raises(ConfigError):
        EqualizationConfig(clip_limit=0)


def test_perceptual_map_properties(extractor):
    a, b = _pair(1)
    assert np.all(perceptual_map(a, a, extractor) == 0)
    p = perceptual_map(a, b, extractor)
    assert p.shape == a.shape and p.min() >= 0 and p.max() > 0
    assert np.allclose(p, perceptual_map(b, a, extractor), atol=1e-12)


def test_perceptual_map_localizes_a_patch(extractor):
    a = np.full((32, 32), 0.4)
    b = a.copy()
    b[4:10, 4:10] = 0.9
    p = perceptual_map(a, b, extractor)
    inside = p[4:10, 4:10].mean()
    far = p[20:, 20:].mean()
    assert inside > 5 * far


def test_perceptual_map_needs_extractor():
    with pytest.raises(StateError):
        perceptual_map(np.zeros((8, 8)), np.zeros((8, 8)), None)


def test_anomaly_map_of_identical_pair_is_zero(extractor):
    x, _ = _pair(2)
    m = anomaly_map(x, x, extractor)
    assert isinstance(m, AnomalyMap) and m.shape == x.shape
    assert np.all(m.scores == 0)


@pytest.mark.parametrize("seed", range(100))
def test_multiplicative_zero(extractor, seed, monkeypatch):
    """Where any factor vanishes the unsmoothed product vanishes too."""
    x, y = _pair(seed)
    r = np.random.default_rng(1000 + seed)
    zero = r.uniform(size=x.shape) < 0.3
    y = np.where(zero, x, y)  # with identity equalization the residual is zero here
    real_eq = scoring.equalize
    monkeypatch.setattr(scoring, "equalize", lambda img, cfg=None: np.asarray(img, float))
    m = anomaly_map(x, y, extractor, median_size=0).scores
    monkeypatch.setattr(scoring, "equalize", real_eq)
    assert np.all(m[zero] == 0)
    assert np.all(m >= 0) and np.any(m[~zero] > 0)


def test_anomaly_map_factors_multiply(extractor):
    x, y = _pair(7)
    cfg = EqualizationConfig()
    m = anomaly_map(x, y, extractor, cfg, median_size=0).scores
    ex, ey = equalize(x, cfg), equalize(y, cfg)
    expected = np.abs(ey - ex) * perceptual_map(y, x, extractor) * perceptual_map(ey, ex, extractor)
    assert np.allclose(m, expected, rtol=1e-10, atol=1e-15)


def test_anomaly_map_rejects_shape_mismatch(extractor):
    with pytest.raises(ConfigError):
        anomaly_map(np.zeros((32, 32)), np.zeros((16, 16)), extractor)


def test_image_score_examples():
    m = np.zeros((10, 10))
    assert image_score(m) == 0.0
    m[0, 0] = 5.0
    assert image_score(m) == 5.0
    assert image_score(m, top_percent=2.0) == 2.5
    assert image_score(np.arange(100.0), top_percent=100.0) == 49.5


def test_raw_map_round_trip(tmp_path):
    m = np.random.default_rng(0).uniform(size=(12, 7)).astype(np.float32)
    path = write_raw_map(tmp_path / "a.ramp", m)
    back = read_raw_map(path)
    assert np.array_equal(back, m.astype(np.float64))
    assert path.read_bytes()[:4] == b"RAMP" and len(path.read_bytes()) == 16 + 4 * 84
    (tmp_path / "bad.ramp").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(DataError):
        read_raw_map(tmp_path / "bad.ramp")


def test_heatmap_rendering(tmp_path):
    assert np.all(heatmap_image(np.full((4, 4), 3.0)) == 0)
    h = heatmap_image(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert h.dtype == np.uint8 and h.min() == 0 and h.max() == 255
    from PIL import Image
    path = write_heatmap(tmp_path / "h.png", np.array([[0.0, 1.0]]))
    assert np.array_equal(np.asarray(Image.open(path)), [[0, 255]])


def test_vgg_backend_unavailable_is_reported(monkeypatch):
    import builtins
    real_import = builtins.__import__

    def fake(name, *a, **kw):
        if name.startswith("torchvision"):
            raise ImportError(name)
        return real_import(name, *a, **kw)

    monkeypatch.setattr(builtins, "__import__", fake)
    with pytest.raises(StateError, match="vgg16"):
        make_extractor("vgg16")
    with pytest.raises(ConfigError):
        make_extractor("resnet")


def test_score_images_shapes(small_model):
    small_model.fitted = True
    imgs = np.random.default_rng(0).uniform(size=(3, 32, 32))
    x_ph, maps = score_images(small_model, imgs)
    assert x_ph.shape == imgs.shape and len(maps) == 3
    assert all(m.shape == (32, 32) and np.all(m.scores >= 0) for m in maps)
