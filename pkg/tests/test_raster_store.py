import numpy as np
import pytest

from cdnet.errors import SceneError
from cdnet.raster_store import (MASK_FILE, ChangeMask, load_mask, load_scene, save_mask, save_scene,
                                scene_stats, subset_dates)
from cdnet.synthgen import SynthParams, generate_scene


def test_round_trip_equals_original(tmp_path, synth_scene):
    save_scene(synth_scene, tmp_path / 'scene')
    assert load_scene(tmp_path / 'scene') == synth_scene


def test_resave_is_byte_identical(tmp_path, synth_scene):
    save_scene(synth_scene, tmp_path / 'a')
    save_scene(load_scene(tmp_path / 'a'), tmp_path / 'b')
    for path in sorted((tmp_path / 'a').iterdir()):
        assert path.read_bytes() == (tmp_path / 'b' / path.name).read_bytes()


def test_layout_has_one_file_per_date_and_band(tmp_path, make_scene):
    rasters = np.arange(3 * 4 * 8 * 8).reshape(3, 4, 8, 8)
    scene = make_scene(rasters, mask=np.eye(8))
    save_scene(scene, tmp_path)

    assert len(list(tmp_path.glob('*.raw'))) == 12 + 1
    assert (tmp_path / 'manifest.json').exists()
    assert (tmp_path / MASK_FILE).stat().st_size == 64


def test_missing_band_file_is_incomplete(tmp_path, synth_scene):
    save_scene(synth_scene, tmp_path)
    date = synth_scene.manifest.dates[2]
    (tmp_path / f"{date}_B03.raw").unlink()
    with pytest.raises(SceneError, match='incomplete scene'):
        load_scene(tmp_path)


def test_truncated_raster_is_inconsistent(tmp_path, synth_scene):
    save_scene(synth_scene, tmp_path)
    path = tmp_path / f"{synth_scene.manifest.dates[0]}_B02.raw"
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(SceneError, match='inconsistent rasters'):
        load_scene(tmp_path)


def test_unordered_dates_rejected(make_scene):
    with pytest.raises(SceneError, match='manifest invalid'):
        make_scene(np.zeros((2, 1, 4, 4)), dates=['2017-05-01', '2017-01-01'])


def test_mask_outside_binary_rejected():
    with pytest.raises(SceneError, match='mask invalid'):
        ChangeMask(np.full((4, 4), 2, dtype=np.uint8))


def test_synth_scene_manifest_fields():
    scene, _ = generate_scene(SynthParams(seed=1, num_dates=2, num_bands=4, height=64, width=64))
    m = scene.manifest
    assert (m.num_dates, m.num_bands, m.height, m.width) == (2, 4, 64, 64)
    assert scene.raster(1, 'B08').values.shape == (64, 64)


def test_stats_constant_band(make_scene):
    stats = scene_stats([make_scene(np.full((2, 1, 4, 4), 5))])
    assert stats.mean[0] == 5.0
    assert stats.std[0] == 0.0


def test_stats_two_values(make_scene):
    rasters = np.zeros((2, 1, 4, 4))
    rasters[:, :, :2] = 10
    stats = scene_stats([make_scene(rasters)])
    assert stats.mean[0] == pytest.approx(5.0)
    assert stats.std[0] == pytest.approx(5.0)


def test_stats_pool_scenes(make_scene):
    rng = np.random.default_rng(3)
    a = make_scene(rng.integers(0, 3000, size=(2, 3, 8, 8)), scene_id='a')
    b = make_scene(rng.integers(0, 3000, size=(3, 3, 6, 5)), scene_id='b',
                   dates=['2018-01-01', '2018-02-01', '2018-03-01'])
    stats = scene_stats([a, b])

    for band in range(3):
        pooled = np.concatenate([a.rasters[:, band].ravel(), b.rasters[:, band].ravel()]).astype(np.float64)
        assert stats.mean[band] == pytest.approx(pooled.mean(), rel=1e-12)
        assert stats.std[band] == pytest.approx(pooled.std(), rel=1e-12)


def test_stats_ignore_scene_and_date_order(make_scene):
    rng = np.random.default_rng(11)
    for trial in range(50):
        a, b, c = (make_scene(rng.integers(0, 65536, size=(3, 2, 9, 7)), scene_id=name)
                   for name in ('a', 'b', 'c'))
        forward = scene_stats([a, b, c])
        backward = scene_stats([c, b, a])
        assert np.array_equal(forward.mean, backward.mean)
        assert np.array_equal(forward.std, backward.std)

        flipped = [make_scene(s.rasters[::-1], scene_id=s.scene_id) for s in (a, b, c)]
        assert np.array_equal(scene_stats(flipped).std, forward.std)
        assert np.array_equal(scene_stats(flipped).mean, forward.mean)


def test_stats_empty_list():
    with pytest.raises(SceneError):
        scene_stats([])


def test_band_stats_serialization(synth_scene):
    stats = scene_stats([synth_scene])
    restored = type(stats).from_dict(stats.to_dict())
    assert restored.band_names == stats.band_names
    np.testing.assert_array_equal(restored.mean, stats.mean)


def test_subset_dates_keeps_endpoints(synth_scene):
    sub = subset_dates(synth_scene, 3)
    dates = synth_scene.manifest.dates
    assert sub.manifest.dates == [dates[0], dates[2], dates[4]]
    np.testing.assert_array_equal(sub.rasters[-1], synth_scene.rasters[-1])
    assert sub.mask == synth_scene.mask

    with pytest.raises(SceneError):
        subset_dates(synth_scene, 6)


def test_mask_directory_and_scene_directory(tmp_path, synth_scene):
    save_mask(synth_scene.mask, tmp_path / 'pred')
    assert load_mask(tmp_path / 'pred') == synth_scene.mask

    save_scene(synth_scene, tmp_path / 'scene')
    assert load_mask(tmp_path / 'scene') == synth_scene.mask

    with pytest.raises(SceneError, match='incomplete scene'):
        load_mask(tmp_path / 'nothing-here')
