import math

import numpy as np
import pytest

from nltvsar.core import DataError, ParameterError, RadarParams
from nltvsar.datagen import (
    SceneSpec,
    add_noise,
    generate_dataset,
    load_dataset,
    make_echo,
    make_mask,
    make_noise,
    make_scene,
    measured_snr_db,
)
from nltvsar.operators import build_plan, image


@pytest.fixture(scope="module")
def plan128():
    return build_plan(RadarParams.for_grid(128, 128), (128, 128))


def test_background_only_scene():
    scene, label = make_scene(SceneSpec(dims=(32, 32), target_count=(0, 0), seed=3))
    assert np.all(label == 0.15)
    assert scene.shape == (32, 32)


def test_scene_deterministic():
    a = make_scene(SceneSpec(seed=11))
    b = make_scene(SceneSpec(seed=11))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = make_scene(SceneSpec(seed=12))
    assert not np.array_equal(a[1], c[1])


def test_targets_in_declared_range():
    for seed in range(10):
        _, label = make_scene(SceneSpec(dims=(64, 64), kinds=("rectangle",), seed=seed))
        vals = np.unique(label)
        targets = vals[vals != 0.15]
        assert np.all((targets >= 0.4) & (targets <= 1.0))


def test_phase_model_keeps_modulus():
    scene, label = make_scene(SceneSpec(dims=(32, 32), speckle="phase", seed=1))
    np.testing.assert_allclose(np.abs(scene), label)


def test_gaussian_model_is_single_look():
    scene, label = make_scene(SceneSpec(dims=(256, 256), target_count=(0, 0), seed=2))
    amp = np.abs(scene)
    assert amp.mean() == pytest.approx(0.15, rel=0.02)
    assert (0.5227 * amp.mean() / amp.std()) ** 2 == pytest.approx(1.0, rel=0.05)


def test_spec_validation():
    with pytest.raises(ParameterError):
        SceneSpec(kinds=("triangle",))
    with pytest.raises(ParameterError):
        SceneSpec(speckle="none")
    with pytest.raises(ParameterError):
        SceneSpec(target_count=(3, 1))


def test_echo_examples(plan128):
    assert np.all(make_echo(np.zeros((128, 128)), plan128) == 0)
    scene, label = make_scene(SceneSpec(seed=4))
    echo = make_echo(scene, plan128)
    ratio = np.vdot(echo, echo).real / np.vdot(scene, scene).real
    assert 0.98 <= ratio <= 1.02


def test_echo_recovers_structure(plan128):
    scene, label = make_scene(SceneSpec(seed=5, speckle="phase"))
    mag = np.abs(image(plan128, make_echo(scene, plan128)))
    corr = float(np.sum(mag * label) / (np.linalg.norm(mag) * np.linalg.norm(label)))
    assert corr > 0.9


@pytest.mark.parametrize("snr", [0.0, 5.0, 12.5])
def test_noise_snr_exact(plan128, snr):
    scene, _ = make_scene(SceneSpec(seed=6))
    echo = make_echo(scene, plan128)
    noise = make_noise(echo, snr, 7)
    assert abs(measured_snr_db(echo, noise) - snr) < 0.01
    noisy = add_noise(echo, snr, 7)
    np.testing.assert_allclose(noisy - noise, echo, atol=1e-14)


def test_noise_edge_cases():
    echo = np.ones((4, 4), complex)
    assert np.array_equal(add_noise(echo, math.inf, 0), echo)
    with pytest.raises(DataError):
        add_noise(np.zeros((4, 4)), 5.0, 0)
    with pytest.raises(ParameterError):
        add_noise(echo, math.nan, 0)


def test_mask_examples():
    full = make_mask((64, 64), 0.0, 0.0, 0)
    assert full.kept_fraction == 1.0 and full.dsr == 0.0
    m = make_mask((512, 512), 0.1, 0.1, 1)
    assert m.kept_fraction == pytest.approx(0.81, abs=1e-3)
    assert m.azimuth_keep.sum() == 461
    assert make_mask((512, 512), 0.1, 0.1, 1) == m
    with pytest.raises(ParameterError):
        make_mask((8, 8), 1.0, 0.0, 0)


def test_dataset_round_trip(tmp_path):
    plan = build_plan(RadarParams.for_grid(32, 32), (32, 32))
    ds = generate_dataset(tmp_path, plan, 5, snr_db=5.0, az_drop=0.1, rg_drop=0.1,
                          seed=3, split=0.6)
    assert ds.train_ids == ["0000", "0001", "0002"] and ds.test_ids == ["0003", "0004"]
    back = load_dataset(tmp_path)
    assert back.dims == (32, 32)
    assert back.items == ds.items
    assert back.train_ids == ds.train_ids and back.test_ids == ds.test_ids
    scene, label, echo, mask = back.load("0002")
    assert scene.shape == label.shape == echo.shape == (32, 32)
    assert mask.kept_fraction == pytest.approx(ds.items[2].kept_fraction)

    again = generate_dataset(tmp_path / "b", plan, 5, snr_db=5.0, az_drop=0.1,
                             rg_drop=0.1, seed=3, split=0.6)
    for it in again.items:
        for kind in ("scenes", "echoes", "masks"):
            assert again.path(kind, it.item_id).read_bytes() == ds.path(kind, it.item_id).read_bytes()


def test_missing_dataset(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere")
