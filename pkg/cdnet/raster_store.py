"""On-disk and in-memory representation of multi-date scenes and change masks"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dateutil import parser as date_parser

from cdnet.errors import SceneError

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
MASK_FILE = 'mask.raw'
MASK_SIDECAR = 'mask.json'
RASTER_DTYPE = np.dtype('<u2')
MASK_DTYPE = np.dtype('u1')


@dataclass(frozen=True)
class BandRaster:
    """One band of one date"""
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise SceneError(f"inconsistent rasters: band raster must be a non-empty 2-D grid, got {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    dates: List[str]
    band_names: List[str]
    height: int
    width: int

    def validate(self) -> None:
        if not self.scene_id:
            raise SceneError("manifest invalid: empty scene_id")
        if len(self.dates) < 2:
            raise SceneError(f"manifest invalid: need at least 2 dates, got {len(self.dates)}")
        try:
            parsed = [date_parser.isoparse(d) for d in self.dates]
        except (ValueError, TypeError) as e:
            raise SceneError(f"manifest invalid: bad ISO-8601 date ({str(e)})") from e
        if any(b <= a for a, b in zip(parsed, parsed[1:])):
            raise SceneError(f"manifest invalid: dates not strictly ascending: {self.dates}")
        if not self.band_names:
            raise SceneError("manifest invalid: no bands")
        if len(set(self.band_names)) != len(self.band_names):
            raise SceneError(f"manifest invalid: duplicate band names: {self.band_names}")
        if self.height < 1 or self.width < 1:
            raise SceneError(f"manifest invalid: bad dimensions {self.height}x{self.width}")

    @property
    def num_dates(self) -> int:
        return len(self.dates)

    @property
    def num_bands(self) -> int:
        return len(self.band_names)


@dataclass(frozen=True, eq=False)
class ChangeMask:
    """Binary per-pixel labels, 1 = change"""
    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise SceneError(f"mask invalid: expected 2-D labels, got shape {self.labels.shape}")
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise SceneError("mask invalid: labels outside {0,1}")
        object.__setattr__(self, 'labels', self.labels.astype(MASK_DTYPE, copy=False))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ChangeMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class Scene:
    """
    Co-registered multi-date stack. rasters has shape (T, C, H, W), uint16,
    indexed [date][band].
    """
    manifest: SceneManifest
    rasters: np.ndarray
    mask: Optional[ChangeMask] = None

    def __post_init__(self):
        self.manifest.validate()
        m = self.manifest
        expected = (m.num_dates, m.num_bands, m.height, m.width)
        if self.rasters.ndim != 4 or self.rasters.shape[:2] != expected[:2]:
            raise SceneError(f"incomplete scene: raster grid {self.rasters.shape[:2]} != (T, C) {expected[:2]}")
        if self.rasters.shape != expected:
            raise SceneError(f"inconsistent rasters: shape {self.rasters.shape} != manifest {expected}")
        object.__setattr__(self, 'rasters', self.rasters.astype(RASTER_DTYPE, copy=False))
        if self.mask is not None and self.mask.labels.shape != (m.height, m.width):
            raise SceneError(f"inconsistent rasters: mask shape {self.mask.labels.shape} != {(m.height, m.width)}")

    @property
    def scene_id(self) -> str:
        return self.manifest.scene_id

    def raster(self, date_index: int, band: str) -> BandRaster:
        return BandRaster(self.rasters[date_index, self.manifest.band_names.index(band)])

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.manifest == other.manifest
                and np.array_equal(self.rasters, other.rasters)
                and self.mask == other.mask)


@dataclass
class BandStats:
    """Per-band mean and population std over all training pixels"""
    band_names: List[str]
    mean: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            name: {'mean': float(m), 'std': float(s)}
            for name, m, s in zip(self.band_names, self.mean, self.std)
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, float]]) -> 'BandStats':
        names = list(data)
        return cls(
            band_names=names,
            mean=np.array([data[n]['mean'] for n in names], dtype=np.float64),
            std=np.array([data[n]['std'] for n in names], dtype=np.float64),
        )


def _manifest_dict(scene: Scene) -> Dict[str, Any]:
    m = scene.manifest
    return {
        'scene_id': m.scene_id,
        'dates': list(m.dates),
        'bands': list(m.band_names),
        'height': m.height,
        'width': m.width,
        'has_mask': scene.mask is not None,
    }


def save_scene(scene: Scene, path) -> None:
    """Write manifest.json, one <date>_<band>.raw per raster and mask.raw if present"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    with open(path / MANIFEST_FILE, 'w') as f:
        json.dump(_manifest_dict(scene), f, indent=2)
        f.write('\n')

    for t, date in enumerate(scene.manifest.dates):
        for c, band in enumerate(scene.manifest.band_names):
            (path / f"{date}_{band}.raw").write_bytes(scene.rasters[t, c].astype(RASTER_DTYPE).tobytes())

    mask_path = path / MASK_FILE
    if scene.mask is not None:
        mask_path.write_bytes(scene.mask.labels.astype(MASK_DTYPE).tobytes())
    elif mask_path.exists():
        mask_path.unlink()

    logger.debug(f"Saved scene {scene.scene_id} to {path}")


def _read_raw(path: Path, dtype: np.dtype, height: int, width: int) -> np.ndarray:
    data = path.read_bytes()
    expected = height * width * dtype.itemsize
    if len(data) != expected:
        raise SceneError(f"inconsistent rasters: {path.name} has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype).reshape(height, width).copy()


def load_scene(path) -> Scene:
    """Load and validate a scene directory"""
    path = Path(path)
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.exists():
        raise SceneError(f"incomplete scene: {manifest_path} not found")

    try:
        with open(manifest_path, 'r') as f:
            raw = json.load(f)
        manifest = SceneManifest(
            scene_id=str(raw['scene_id']),
            dates=list(raw['dates']),
            band_names=list(raw['bands']),
            height=int(raw['height']),
            width=int(raw['width']),
        )
        has_mask = bool(raw.get('has_mask', False))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise SceneError(f"manifest invalid: {str(e)}") from e
    manifest.validate()

    rasters = np.empty((manifest.num_dates, manifest.num_bands, manifest.height, manifest.width), dtype=RASTER_DTYPE)
    for t, date in enumerate(manifest.dates):
        for c, band in enumerate(manifest.band_names):
            raster_path = path / f"{date}_{band}.raw"
            if not raster_path.exists():
                raise SceneError(f"incomplete scene: missing {raster_path.name}")
            rasters[t, c] = _read_raw(raster_path, RASTER_DTYPE, manifest.height, manifest.width)

    mask = None
    mask_path = path / MASK_FILE
    if has_mask:
        if not mask_path.exists():
            raise SceneError(f"incomplete scene: manifest declares a mask but {MASK_FILE} is missing")
        mask = ChangeMask(_read_raw(mask_path, MASK_DTYPE, manifest.height, manifest.width))

    logger.debug(f"Loaded scene {manifest.scene_id}: T={manifest.num_dates} C={manifest.num_bands} "
                 f"{manifest.height}x{manifest.width}")
    return Scene(manifest=manifest, rasters=rasters, mask=mask)


def save_mask(mask: ChangeMask, path) -> None:
    """Write a standalone mask directory: mask.raw plus mask.json carrying the dimensions"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / MASK_FILE).write_bytes(mask.labels.astype(MASK_DTYPE).tobytes())
    with open(path / MASK_SIDECAR, 'w') as f:
        json.dump({'height': mask.height, 'width': mask.width}, f, indent=2)
        f.write('\n')


def load_mask(path) -> ChangeMask:
    """Read a mask from a mask directory or from a scene directory with a mask"""
    path = Path(path)
    if (path / MASK_SIDECAR).exists():
        with open(path / MASK_SIDECAR, 'r') as f:
            dims = json.load(f)
        height, width = int(dims['height']), int(dims['width'])
    elif (path / MANIFEST_FILE).exists():
        scene = load_scene(path)
        if scene.mask is None:
            raise SceneError(f"incomplete scene: {path} has no mask")
        return scene.mask
    else:
        raise SceneError(f"incomplete scene: no mask found in {path}")

    if not (path / MASK_FILE).exists():
        raise SceneError(f"incomplete scene: missing {MASK_FILE} in {path}")
    return ChangeMask(_read_raw(path / MASK_FILE, MASK_DTYPE, height, width))


def scene_stats(scenes: Sequence[Scene]) -> BandStats:
    """Per-band mean and population std over every pixel of every date of every scene"""
    if not scenes:
        raise SceneError("scene_stats needs at least one scene")

    band_names = list(scenes[0].manifest.band_names)
    for scene in scenes[1:]:
        if list(scene.manifest.band_names) != band_names:
            raise SceneError(f"inconsistent rasters: band names differ in scene {scene.scene_id}")

    # exact integer moments per band, so the result does not depend on scene or date order
    count = 0
    totals = [0] * len(band_names)
    squares = [0] * len(band_names)
    for scene in scenes:
        t, _, h, w = scene.rasters.shape
        count += t * h * w
        for date in scene.rasters.astype(np.int64):
            date_sums = date.sum(axis=(1, 2))
            date_squares = (date * date).sum(axis=(1, 2))
            for b in range(len(band_names)):
                totals[b] += int(date_sums[b])
                squares[b] += int(date_squares[b])

    mean = np.array([s / count for s in totals], dtype=np.float64)
    # n*sum(x^2) - sum(x)^2 is an exact non-negative integer
    var = np.array([(count * q - s * s) / (count * count) for s, q in zip(totals, squares)], dtype=np.float64)
    std = np.sqrt(var)

    return BandStats(band_names=band_names, mean=mean, std=std)


def subset_dates(scene: Scene, count: int) -> Scene:
    """
    Keep `count` dates spread evenly over the sequence, always including the
    first and last acquisition.
    """
    total = scene.manifest.num_dates
    if count < 2 or count > total:
        raise SceneError(f"manifest invalid: cannot select {count} of {total} dates")

    indices = sorted(set(int(round(i)) for i in np.linspace(0, total - 1, count)))
    m = scene.manifest
    manifest = SceneManifest(
        scene_id=m.scene_id,
        dates=[m.dates[i] for i in indices],
        band_names=list(m.band_names),
        height=m.height,
        width=m.width,
    )
    return Scene(manifest=manifest, rasters=scene.rasters[indices].copy(), mask=scene.mask)
