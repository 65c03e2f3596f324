import dataclasses

import numpy as np
import pytest

from cdnet.errors import ConfigError, SynthError
from cdnet.raster_store import load_scene
from cdnet.synthgen import (SynthParams, generate_scene, load_events, split_scenes, split_synthetic,
                            synthetic_dates, write_scene)
from cdnet.utils.config_parser import build_dataclass


def quiet(**overrides):
    base = dict(n_urban_events=0, n_cloud_events=0, n_soil_patches=0, noise_std=0.0, seasonal_amplitude=0.0)
    base.update(overrides)
    return SynthParams(**base)


def test_no_events_no_noise_gives_static_scene():
    scene, log = generate_scene(quiet(seed=4))
    assert scene.mask.labels.sum() == 0
    assert not log.events
    for t in range(1, scene.manifest.num_dates):
        np.testing.assert_array_equal(scene.rasters[t], scene.rasters[0])


def test_same_seed_same_bytes(small_params):
    a, log_a = generate_scene(small_params)
    b, log_b = generate_scene(small_params)
    assert a.rasters.tobytes() == b.rasters.tobytes()
    assert a.mask == b.mask
    assert log_a.to_dict() == log_b.to_dict()


def test_disjoint_urban_mask_matches_rectangles():
    params = SynthParams(seed=11, n_urban_events=3, disjoint_urban=True)
    scene, log = generate_scene(params)
    urban = log.of_kind('urban')
    assert len(urban) == 3
    assert scene.mask.labels.sum() == sum(h * w for _, _, h, w in (e.region for e in urban))

    brute = np.zeros((params.height, params.width), dtype=np.uint8)
    for e in urban:
        r, c, h, w = e.region
        for i in range(r, r + h):
            for j in range(c, c + w):
                brute[i, j] = 1
    np.testing.assert_array_equal(scene.mask.labels, brute)


def test_urban_onset_after_first_date():
    for seed in range(10):
        _, log = generate_scene(SynthParams(seed=seed))
        for e in log.of_kind('urban'):
            assert 1 <= e.onset <= 4


def test_urban_absent_at_first_date_present_at_last():
    params = quiet(seed=2, n_urban_events=2)
    scene, log = generate_scene(params)
    changed = scene.mask.labels.astype(bool)
    assert changed.any()
    assert (scene.rasters[-1][:, changed] > scene.rasters[0][:, changed]).all()
    np.testing.assert_array_equal(scene.rasters[-1][:, ~changed], scene.rasters[0][:, ~changed])


def test_interior_clouds_leave_endpoints_untouched():
    for seed in range(5):
        clear, _ = generate_scene(quiet(seed=seed, seasonal_amplitude=0.1))
        cloudy, log = generate_scene(quiet(seed=seed, seasonal_amplitude=0.1, n_cloud_events=2, cloud_shadow=True))
        assert {e.onset for e in log.of_kind('cloud')} <= {1, 2, 3}
        np.testing.assert_array_equal(cloudy.rasters[0], clear.rasters[0])
        np.testing.assert_array_equal(cloudy.rasters[-1], clear.rasters[-1])
        assert cloudy.mask == clear.mask


def test_clouds_brighten_a_single_date():
    scene, log = generate_scene(quiet(seed=5, n_cloud_events=1))
    (cloud,) = log.of_kind('cloud')
    r, c, _, _ = cloud.region
    brightened = [t for t in range(scene.manifest.num_dates) if scene.rasters[t, 0, r, c] > scene.rasters[0, 0, r, c]]
    assert brightened == [cloud.onset]


def test_soil_patches_are_not_labeled():
    scene, log = generate_scene(quiet(seed=9, n_soil_patches=3))
    assert len(log.of_kind('soil')) == 3
    assert scene.mask.labels.sum() == 0
    for e in log.of_kind('soil'):
        assert len(e.active_dates) == scene.manifest.num_dates


def test_two_dates_skip_interior_clouds():
    _, log = generate_scene(quiet(seed=1, num_dates=2, n_cloud_events=1))
    assert not log.of_kind('cloud')


def test_placement_failure():
    with pytest.raises(SynthError, match='placement failure'):
        generate_scene(SynthParams(height=32, width=32, urban_size_range=(40, 50)))
    with pytest.raises(SynthError, match='placement failure'):
        generate_scene(SynthParams(height=32, width=32, n_urban_events=20, urban_size_range=(14, 14)))


def test_quarterly_dates():
    assert synthetic_dates(SynthParams(num_dates=3, start_date='2016-11-30')) == \
        ['2016-11-30', '2017-02-28', '2017-05-30']


def test_values_inside_uint16(small_params):
    scene, log = generate_scene(dataclasses.replace(small_params, noise_std=500.0))
    assert scene.rasters.dtype == np.uint16
    assert log.clamped_pixels >= 0


def test_split_counts_and_partition():
    scenes = [generate_scene(quiet(seed=s, height=32, width=32))[0] for s in range(10)]
    train, test = split_scenes(scenes, 0.8)
    assert (len(train), len(test)) == (8, 2)
    train_ids = {s.scene_id for s in train}
    test_ids = {s.scene_id for s in test}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {s.scene_id for s in scenes}

    again, _ = split_scenes(list(reversed(scenes)), 0.8)
    assert [s.scene_id for s in again] == [s.scene_id for s in train]


def test_split_synthetic_rejects_bad_fraction():
    with pytest.raises(SynthError):
        split_synthetic([quiet(seed=0), quiet(seed=1)], 1.0)
    train, test = split_synthetic([quiet(seed=0, height=32, width=32), quiet(seed=1, height=32, width=32)], 0.5)
    assert len(train) == len(test) == 1


def test_write_scene_emits_events(tmp_path, small_params):
    scene, log = generate_scene(small_params)
    write_scene(scene, log, tmp_path)
    assert load_scene(tmp_path) == scene
    assert load_events(tmp_path).to_dict() == log.to_dict()


def test_params_from_config_section():
    params = build_dataclass(SynthParams, {'seed': 3, 'urban_size_range': [4, 8]}, 'synth')
    assert params.urban_size_range == (4, 8)
    with pytest.raises(ConfigError, match='unknown keys'):
        build_dataclass(SynthParams, {'clouds': 2}, 'synth')
    with pytest.raises(ConfigError):
        build_dataclass(SynthParams, {'num_dates': 1}, 'synth')
