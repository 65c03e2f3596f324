import numpy as np
import pytest
import torch
from PIL import Image

from cdnet.errors import InferenceError
from cdnet.infer import (COLOR_FN, COLOR_FP, COLOR_TN, COLOR_TP, ProbabilityMap, evaluate, metrics_from_counts,
                         predict_scene, render_comparison, save_png, threshold, tile_origins)
from cdnet.net import NetConfig
from cdnet.raster_store import ChangeMask, scene_stats
from cdnet.sampler import normalize


def test_tile_origins():
    assert tile_origins(48, 32, 16) == [0, 16]
    assert tile_origins(32, 32, 16) == [0]
    assert tile_origins(50, 32, 16) == [0, 16, 18]
    assert tile_origins(64, 32, 32) == [0, 32]
    with pytest.raises(InferenceError):
        tile_origins(20, 32, 16)


def brute_force_map(model, pixels, tile, stride):
    _, _, h, w = pixels.shape
    acc = np.zeros((h, w))
    cover = np.zeros((h, w))
    for r in tile_origins(h, tile, stride):
        for c in tile_origins(w, tile, stride):
            with torch.no_grad():
                p = model(torch.from_numpy(pixels[None, :, :, r:r + tile, c:c + tile]))[0, 1].numpy()
            acc[r:r + tile, c:c + tile] += p
            cover[r:r + tile, c:c + tile] += 1
    return acc / cover, cover


def test_tiling_matches_brute_force(make_scene, make_checkpoint):
    rng = np.random.default_rng(0)
    scene = make_scene(rng.integers(0, 3000, size=(3, 4, 48, 48)), mask=np.zeros((48, 48)),
                       dates=['2017-01-01', '2017-02-01', '2017-03-01'])
    ckpt = make_checkpoint(NetConfig(in_channels=4, base_depth=4, levels=3), seed=1, scene=scene)
    pixels = normalize(scene.rasters, ckpt.band_stats, scene.manifest.band_names)

    expected, cover = brute_force_map(ckpt.to_model(), pixels, 32, 16)
    assert cover[16:32, 16:32].min() == 4
    pm = predict_scene([ckpt], scene, tile=32, tile_stride=16)
    np.testing.assert_allclose(pm.p_change, expected, atol=1e-6)


def test_single_tile_equals_direct_forward(make_scene, make_checkpoint):
    rng = np.random.default_rng(1)
    scene = make_scene(rng.integers(0, 3000, size=(2, 4, 32, 32)))
    ckpt = make_checkpoint(NetConfig(in_channels=4, base_depth=4, levels=3), seed=2, scene=scene)
    pixels = normalize(scene.rasters, ckpt.band_stats, scene.manifest.band_names)
    with torch.no_grad():
        direct = ckpt.to_model()(torch.from_numpy(pixels[None]))[0, 1].numpy()
    np.testing.assert_allclose(predict_scene([ckpt], scene).p_change, direct, atol=1e-6)


def test_non_overlapping_tiles_cover_once(make_scene, make_checkpoint):
    rng = np.random.default_rng(2)
    scene = make_scene(rng.integers(0, 3000, size=(2, 4, 32, 48)))
    ckpt = make_checkpoint(NetConfig(in_channels=4, base_depth=4, levels=3), scene=scene)
    pixels = normalize(scene.rasters, ckpt.band_stats, scene.manifest.band_names)
    expected, cover = brute_force_map(ckpt.to_model(), pixels, 16, 16)
    assert (cover == 1).all()
    np.testing.assert_allclose(predict_scene([ckpt], scene, tile=16, tile_stride=16).p_change, expected,
                               atol=1e-6)


def test_identical_ensemble_is_bit_exact(synth_scene, make_checkpoint):
    cfg = NetConfig(in_channels=4, base_depth=4, levels=3)
    ckpt = make_checkpoint(cfg, seed=3, scene=synth_scene)
    single = predict_scene([ckpt], synth_scene)
    ensemble = predict_scene([ckpt] * 5, synth_scene)
    assert np.array_equal(single.p_change, ensemble.p_change)


def test_ensemble_order_invariant(synth_scene, make_checkpoint):
    cfg = NetConfig(in_channels=4, base_depth=4, levels=3)
    stats = scene_stats([synth_scene])
    ckpts = [make_checkpoint(cfg, seed=s, band_stats=stats) for s in (1, 2, 3)]
    a = predict_scene(ckpts, synth_scene)
    b = predict_scene(list(reversed(ckpts)), synth_scene)
    assert np.array_equal(a.p_change, b.p_change)
    assert 0.0 <= a.p_change.min() and a.p_change.max() <= 1.0


def test_predict_rejects_bad_inputs(synth_scene, make_checkpoint):
    with pytest.raises(InferenceError):
        predict_scene([], synth_scene)
    a = make_checkpoint(NetConfig(in_channels=4, base_depth=4, levels=3), scene=synth_scene)
    b = make_checkpoint(NetConfig(in_channels=4, base_depth=8, levels=3), scene=synth_scene)
    with pytest.raises(InferenceError, match='mismatch'):
        predict_scene([a, b], synth_scene)
    with pytest.raises(InferenceError):
        predict_scene([a], synth_scene, tile=128)


def test_threshold_rules():
    assert threshold(ProbabilityMap(np.zeros((4, 4), dtype=np.float32))).labels.sum() == 0
    assert threshold(ProbabilityMap(np.full((2, 2), 0.5, dtype=np.float32)), 0.5).labels.sum() == 0

    rng = np.random.default_rng(4)
    p = rng.random((37, 29)).astype(np.float32)
    for tau in (0.1, 0.5, 0.9):
        assert threshold(ProbabilityMap(p), tau).labels.sum() == np.count_nonzero(p > tau)
    with pytest.raises(InferenceError):
        threshold(ProbabilityMap(p), 1.0)


def test_probability_map_validation(tmp_path):
    with pytest.raises(InferenceError):
        ProbabilityMap(np.full((2, 2), 1.5, dtype=np.float32))
    pm = ProbabilityMap(np.random.default_rng(5).random((6, 9)).astype(np.float32))
    pm.save(tmp_path)
    assert (tmp_path / 'probability.raw').stat().st_size == 6 * 9 * 4
    np.testing.assert_array_equal(ProbabilityMap.load(tmp_path).p_change, pm.p_change)


def test_perfect_prediction_metrics():
    labels = np.random.default_rng(6).integers(0, 2, size=(16, 16))
    report = evaluate(ChangeMask(labels), ChangeMask(labels))
    assert (report.precision, report.recall, report.f1, report.overall_accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_worked_example():
    gt = np.zeros(1000, dtype=np.uint8)
    pred = np.zeros(1000, dtype=np.uint8)
    gt[:75] = 1        # 50 tp + 25 fn
    pred[:50] = 1
    pred[75:85] = 1    # 10 fp
    report = evaluate(ChangeMask(pred.reshape(40, 25)), ChangeMask(gt.reshape(40, 25)))
    assert (report.tp, report.fp, report.fn, report.tn) == (50, 10, 25, 915)
    assert report.precision == pytest.approx(0.8333, abs=1e-4)
    assert report.recall == pytest.approx(0.6667, abs=1e-4)
    assert report.f1 == pytest.approx(0.7407, abs=1e-4)
    assert report.overall_accuracy == pytest.approx(0.9650, abs=1e-4)


def test_all_zero_prediction():
    gt = np.zeros((10, 10), dtype=np.uint8)
    gt[:3] = 1
    report = evaluate(ChangeMask(np.zeros_like(gt)), ChangeMask(gt))
    assert report.recall == 0.0 and report.f1 == 0.0
    assert report.precision == 0.0 and not report.precision_defined
    assert report.overall_accuracy == pytest.approx(0.7)


def test_metrics_match_brute_force_counts():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 20, size=2))
        pred = rng.integers(0, 2, size=shape)
        gt = rng.integers(0, 2, size=shape)
        counts = {'tp': 0, 'fp': 0, 'fn': 0, 'tn': 0}
        for p, g in zip(pred.ravel(), gt.ravel()):
            counts['tp' if p and g else 'fp' if p else 'fn' if g else 'tn'] += 1
        report = evaluate(ChangeMask(pred), ChangeMask(gt))
        assert (report.tp, report.fp, report.fn, report.tn) == tuple(counts.values())
        assert report.total == pred.size


def test_metrics_from_counts_consistency():
    report = metrics_from_counts(3, 0, 0, 0)
    assert report.f1 == 1.0 and report.overall_accuracy == 1.0
    empty = metrics_from_counts(0, 0, 0, 5)
    assert not empty.precision_defined and not empty.recall_defined
    assert empty.to_dict()['overall_accuracy'] == 1.0


def test_shape_mismatch():
    with pytest.raises(InferenceError, match='shape mismatch'):
        evaluate(ChangeMask(np.zeros((2, 2))), ChangeMask(np.zeros((2, 3))))
    with pytest.raises(InferenceError):
        render_comparison(ChangeMask(np.zeros((2, 2))), ChangeMask(np.zeros((3, 2))))


def test_render_colors():
    zeros = ChangeMask(np.zeros((5, 5)))
    assert not render_comparison(zeros, zeros).any()

    pred = np.zeros((5, 5))
    pred[2, 3] = 1
    image = render_comparison(ChangeMask(pred), zeros)
    red = np.all(image == COLOR_FP, axis=-1)
    assert red.sum() == 1 and red[2, 3]


def test_render_histogram_matches_counts(tmp_path):
    rng = np.random.default_rng(8)
    pred = ChangeMask(rng.integers(0, 2, size=(30, 20)))
    gt = ChangeMask(rng.integers(0, 2, size=(30, 20)))
    report = evaluate(pred, gt)
    image = render_comparison(pred, gt)
    for color, count in ((COLOR_TP, report.tp), (COLOR_FP, report.fp), (COLOR_FN, report.fn), (COLOR_TN, report.tn)):
        assert np.all(image == color, axis=-1).sum() == count

    save_png(image, tmp_path / 'cmp.png')
    with Image.open(tmp_path / 'cmp.png') as png:
        assert png.format == 'PNG'
        np.testing.assert_array_equal(np.asarray(png.convert('RGB')), image)
