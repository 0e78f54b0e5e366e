import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualtrack.correlation import FeaturePyramid
from dualtrack.features import (FeatureProviderConfig, extract_template, image_features, orientation_histogram,
                                provide, synth_features)
from dualtrack.geometry import Box
from dualtrack.sim import SceneObject, SceneState

QUIET = FeatureProviderConfig(noise_sigma=0.0)


def _unit(k, dim=8):
    v = np.zeros(dim)
    v[k] = 1.0
    return v


def _scene(*objs, size=128):
    return SceneState((size, size), tuple(SceneObject(k, ident, box) for k, (ident, box) in enumerate(objs)))


def test_empty_scene_gives_zero_pyramid():
    pyr = synth_features(SceneState((64, 64), ()), QUIET)
    assert pyr.layers.shape == (3, 16, 8, 8)
    assert not pyr.layers.any()


@pytest.mark.parametrize("box", [Box(60.0, 36.0, 30.0, 24.0), Box(50.0, 50.0, 40.0, 40.0),
                                 Box(100.3, 20.7, 44.0, 50.0)])
def test_single_object_peaks_at_its_cell(box):
    pyr = synth_features(_scene((_unit(2), box)), QUIET)
    cell = (int(box.cy // 8), int(box.cx // 8))
    for lvl, layer in enumerate(pyr.layers):
        energy = np.linalg.norm(layer, axis=0)
        r, c = np.unravel_index(np.argmax(energy), energy.shape)
        # layer l is sampled 2**l times coarser than the cell grid
        assert max(abs(r - cell[0]), abs(c - cell[1])) <= (0 if lvl == 0 else 2 ** lvl)


def test_orthogonal_identities_closed_form():
    b1, b2 = Box(36.0, 44.0, 32.0, 24.0), Box(84.0, 76.0, 28.0, 36.0)
    pyr = synth_features(_scene((_unit(0), b1), (_unit(1), b2)), QUIET)
    cfg = QUIET
    objectness = np.ones(8) / math.sqrt(8)

    def blob(box, x, y, blur):
        sx, sy = box.w / 4 * blur, box.h / 4 * blur
        return math.exp(-0.5 * ((x - box.cx) / sx) ** 2 - 0.5 * ((y - box.cy) / sy) ** 2)

    # layer 0 samples cell centers directly
    blur, gi, go = cfg.blur[0], cfg.identity_gain[0], cfg.objectness_gain[0]
    p1 = (int(b1.cy // 8), int(b1.cx // 8))
    p2 = (int(b2.cy // 8), int(b2.cx // 8))

    def feat(p):
        x, y = (p[1] + 0.5) * 8, (p[0] + 0.5) * 8
        v = np.zeros(16)
        for ident, box in ((_unit(0), b1), (_unit(1), b2)):
            v += blob(box, x, y, blur) * np.concatenate([gi * ident, go * objectness])
        return v

    f1, f2 = pyr.layers[0][:, p1[0], p1[1]], pyr.layers[0][:, p2[0], p2[1]]
    assert np.allclose(f1, feat(p1), atol=1e-12) and np.allclose(f2, feat(p2), atol=1e-12)
    x1, y1 = (p1[1] + 0.5) * 8, (p1[0] + 0.5) * 8
    x2, y2 = (p2[1] + 0.5) * 8, (p2[0] + 0.5) * 8
    overlap = blob(b1, x2, y2, blur) + blob(b2, x1, y1, blur)
    ident_part = float(f1[:8] @ f2[:8])
    assert ident_part <= gi ** 2 * overlap + 1e-12


def test_synth_deterministic_and_seeded():
    scene = _scene((_unit(0), Box(50, 50, 30, 30)))
    a = synth_features(scene, FeatureProviderConfig(seed=3))
    b = synth_features(scene, FeatureProviderConfig(seed=3))
    c = synth_features(scene, FeatureProviderConfig(seed=4))
    assert np.array_equal(a.layers, b.layers)
    assert not np.array_equal(a.layers, c.layers)


def test_occluded_object_not_painted():
    scene = SceneState((64, 64), (SceneObject(0, _unit(0), Box(30, 30, 20, 20), visible=False),))
    assert not synth_features(scene, QUIET).layers.any()


def test_identity_dimension_mismatch():
    with pytest.raises(ValueError):
        synth_features(_scene((np.ones(4) / 2, Box(30, 30, 20, 20))), QUIET)


def test_provider_config_validation():
    with pytest.raises(ValueError):
        FeatureProviderConfig(identity_dim=20)
    with pytest.raises(ValueError):
        FeatureProviderConfig(mode="cnn")
    with pytest.raises(ValueError):
        FeatureProviderConfig(layer_count=4)


# ------------------------------------------------------------------ image mode


IMG = FeatureProviderConfig(mode="image")


def test_constant_image_zero_features():
    pyr = image_features(np.full((64, 48), 120, np.uint8), IMG)
    assert pyr.layers.shape == (3, 8, 8, 6)
    assert not pyr.layers.any()


def test_vertical_edge_energy_in_horizontal_gradient_bin():
    img = np.zeros((64, 64))
    img[:, 32:] = 200
    hist = orientation_histogram(img, 8)
    energy = hist.sum(axis=(1, 2))
    assert energy[0] > 0 and energy[0] == energy.sum()
    hist = orientation_histogram(img[:, ::-1], 8)
    assert hist.sum(axis=(1, 2))[4] == hist.sum()


def test_frame_smaller_than_cell():
    with pytest.raises(ValueError):
        image_features(np.zeros((4, 40)), IMG)


def _edge_image(rng, n=64):
    img = np.zeros((n, n))
    for _ in range(6):
        r0, c0 = rng.integers(0, n - 8, 2)
        h, w = rng.integers(4, 24, 2)
        img[r0:r0 + h, c0:c0 + w] += rng.uniform(20, 80)
    # a diagonal ramp adds 45-degree gradients
    ii, jj = np.mgrid[0:n, 0:n]
    return img + 3.0 * ((ii + jj) > n)


def test_quarter_turn_permutes_bins(rng):
    for _ in range(5):
        img = _edge_image(rng)
        hist = orientation_histogram(img, 8)
        turned = orientation_histogram(np.rot90(img), 8)
        # a counter-clockwise quarter turn moves every gradient two bins down
        want = np.rot90(np.roll(hist, -2, axis=0), axes=(1, 2))
        assert np.allclose(turned, want, atol=1e-9)


# ------------------------------------------------------------------ templates


def test_template_raw_crop_and_pooling(rng):
    layers = rng.normal(size=(2, 3, 12, 12))
    pyr = FeaturePyramid(layers, 8.0)
    box = Box.from_xywh(16, 8, 40, 40)
    assert np.array_equal(extract_template(pyr, box), layers[:, :, 1:6, 2:7])
    big = Box.from_xywh(8, 16, 80, 80)
    want = layers[:, :, 2:12, 1:11].reshape(2, 3, 5, 2, 5, 2).mean(axis=(3, 5))
    assert np.allclose(extract_template(pyr, big), want)
    const = FeaturePyramid(np.full((1, 2, 10, 10), 0.7), 8.0)
    assert np.allclose(extract_template(const, Box(37, 41, 19, 23)), 0.7)
    with pytest.raises(ValueError):
        extract_template(pyr, Box.from_xywh(500, 500, 10, 10))


@given(st.integers(0, 2 ** 31 - 1), st.floats(-5, 5))
def test_template_linear(seed, c):
    rng = np.random.default_rng(seed)
    layers = rng.normal(size=(2, 3, 10, 10))
    x0, y0 = rng.uniform(0, 60, 2)
    box = Box.from_xywh(x0, y0, *rng.uniform(8, 40, 2))
    a = extract_template(FeaturePyramid(c * layers, 8.0), box)
    assert np.allclose(a, c * extract_template(FeaturePyramid(layers, 8.0), box), atol=1e-12)


def test_provide_dispatch():
    scene = _scene((_unit(0), Box(30, 30, 20, 20)), size=64)
    assert np.array_equal(provide(scene=scene, cfg=QUIET).layers, synth_features(scene, QUIET).layers)
    with pytest.raises(ValueError):
        provide(cfg=QUIET)
    with pytest.raises(ValueError):
        provide(scene=scene, cfg=IMG)
