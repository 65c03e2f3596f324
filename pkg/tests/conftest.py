import logging
import os

import numpy as np
import pytest

from cdnet.net import NetConfig, build
from cdnet.raster_store import ChangeMask, Scene, SceneManifest, scene_stats
from cdnet.synthgen import SynthParams, generate_scene
from cdnet.trainer import Checkpoint, TrainConfig

RUN_SLOW = os.getenv('CDNET_RUN_SLOW') == '1'


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running acceptance runs, enabled with CDNET_RUN_SLOW=1')


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason='set CDNET_RUN_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def restore_root_handlers():
    """CLI invocations reconfigure the root logger against a temporary stderr"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def make_scene():
    """Build a Scene from raw arrays, filling in manifest defaults"""
    def _make(rasters, mask=None, scene_id='scene-a', dates=None, bands=None):
        rasters = np.asarray(rasters, dtype=np.uint16)
        t, c, h, w = rasters.shape
        manifest = SceneManifest(
            scene_id=scene_id,
            dates=dates or [f"2017-0{i + 1}-01" for i in range(t)],
            band_names=bands or [f"B{i}" for i in range(c)],
            height=h,
            width=w,
        )
        return Scene(manifest=manifest, rasters=rasters,
                     mask=ChangeMask(np.asarray(mask, dtype=np.uint8)) if mask is not None else None)
    return _make


@pytest.fixture
def small_params():
    return SynthParams(seed=7, height=64, width=64, num_dates=5, num_bands=4)


@pytest.fixture
def synth_scene(small_params):
    scene, _ = generate_scene(small_params)
    return scene


@pytest.fixture
def tiny_net_config():
    # size multiple 4, so 16x16 and 32x32 inputs both work
    return NetConfig(in_channels=4, base_depth=4, levels=3, variant='unet_lstm')


@pytest.fixture
def make_checkpoint():
    def _make(net_cfg, seed=0, band_stats=None, scene=None):
        if band_stats is None and scene is not None:
            band_stats = scene_stats([scene])
        model = build(net_cfg, seed)
        model.eval()
        return Checkpoint(state_dict={k: v.clone() for k, v in model.state_dict().items()},
                          net_config=net_cfg, train_config=TrainConfig(seed=seed), seed=seed,
                          band_stats=band_stats)
    return _make
