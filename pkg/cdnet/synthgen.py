"""
Seeded generator of multi-date synthetic scenes.

Only urbanization is labeled as change. Clouds (optionally with shadows),
seasonal modulation, bare-soil fluctuation and sensor noise alter the
appearance of the scene without touching the change mask.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from dateutil.relativedelta import relativedelta

from cdnet.errors import SynthError
from cdnet.raster_store import ChangeMask, Scene, SceneManifest, save_scene

logger = logging.getLogger(__name__)

EVENTS_FILE = 'events.json'
UINT16_MAX = 65535
MAX_PLACEMENT_RETRIES = 200

RGBNIR_BANDS = ['B02', 'B03', 'B04', 'B08']
SENTINEL2_BANDS = ['B01', 'B02', 'B03', 'B04', 'B05', 'B06', 'B07',
                   'B08', 'B8A', 'B09', 'B10', 'B11', 'B12']


def default_band_names(num_bands: int) -> List[str]:
    if num_bands == 4:
        return list(RGBNIR_BANDS)
    if num_bands == 13:
        return list(SENTINEL2_BANDS)
    return [f"B{i + 1:02d}" for i in range(num_bands)]


@dataclass
class SynthParams:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_dates: int = 5
    num_bands: int = 4
    n_urban_events: int = 3
    urban_size_range: Tuple[int, int] = (6, 14)
    disjoint_urban: bool = True
    n_cloud_events: int = 1
    cloud_radius_range: Tuple[int, int] = (6, 14)
    cloud_dates: str = 'interior'
    cloud_shadow: bool = False
    seasonal_amplitude: float = 0.1
    n_soil_patches: int = 2
    soil_size_range: Tuple[int, int] = (6, 14)
    # bare-soil signature as a multiple of the urban one; 1.0 makes them spectrally identical
    soil_similarity: float = 1.0
    noise_std: float = 40.0
    start_date: str = '2016-01-15'
    months_between_dates: int = 3

    def __post_init__(self):
        self.urban_size_range = tuple(self.urban_size_range)
        self.cloud_radius_range = tuple(self.cloud_radius_range)
        self.soil_size_range = tuple(self.soil_size_range)

    def validate(self) -> None:
        if self.num_dates < 2:
            raise SynthError(f"params invalid: num_dates must be >= 2, got {self.num_dates}")
        if self.num_bands < 1 or self.height < 1 or self.width < 1:
            raise SynthError("params invalid: bands, height and width must be >= 1")
        for name in ('n_urban_events', 'n_cloud_events', 'n_soil_patches'):
            if getattr(self, name) < 0:
                raise SynthError(f"params invalid: {name} must be >= 0")
        for name in ('urban_size_range', 'cloud_radius_range', 'soil_size_range'):
            lo, hi = getattr(self, name)
            if lo < 1 or lo > hi:
                raise SynthError(f"params invalid: {name} must be ordered and positive, got {(lo, hi)}")
        if self.seasonal_amplitude < 0 or self.noise_std < 0 or self.soil_similarity < 0:
            raise SynthError("params invalid: seasonal_amplitude, noise_std and soil_similarity must be >= 0")
        if self.cloud_dates not in ('interior', 'any'):
            raise SynthError(f"params invalid: cloud_dates must be 'interior' or 'any', got {self.cloud_dates}")
        if self.months_between_dates < 1:
            raise SynthError("params invalid: months_between_dates must be >= 1")

    def to_dict(self):
        d = asdict(self)
        for name in ('urban_size_range', 'cloud_radius_range', 'soil_size_range'):
            d[name] = list(d[name])
        return d


@dataclass
class Event:
    kind: str  # urban | cloud | shadow | soil
    region: Tuple[int, int, int, int]  # rectangles: (row, col, height, width); disks: (center_row, center_col, radius, 0)
    onset: int
    bands: List[int]
    # soil patches: per-date on/off
    active_dates: Optional[List[int]] = None

    def to_dict(self):
        d = asdict(self)
        d['region'] = list(self.region)
        if d['active_dates'] is None:
            del d['active_dates']
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d['kind'], region=tuple(d['region']), onset=int(d['onset']),
                   bands=list(d['bands']), active_dates=d.get('active_dates'))


@dataclass
class EventLog:
    events: List[Event] = field(default_factory=list)
    clamped_pixels: int = 0

    def of_kind(self, kind: str) -> List[Event]:
        return [e for e in self.events if e.kind == kind]

    def urban_mask(self, height: int, width: int) -> np.ndarray:
        """Rasterize urban rectangles into a binary mask"""
        mask = np.zeros((height, width), dtype=np.uint8)
        for e in self.of_kind('urban'):
            r, c, h, w = e.region
            mask[r:r + h, c:c + w] = 1
        return mask

    def to_dict(self):
        return {'events': [e.to_dict() for e in self.events], 'clamped_pixels': self.clamped_pixels}

    @classmethod
    def from_dict(cls, d):
        return cls(events=[Event.from_dict(e) for e in d.get('events', [])],
                   clamped_pixels=int(d.get('clamped_pixels', 0)))


def save_events(log: EventLog, path) -> None:
    with open(Path(path) / EVENTS_FILE, 'w') as f:
        json.dump(log.to_dict(), f, indent=2)
        f.write('\n')


def load_events(path) -> EventLog:
    with open(Path(path) / EVENTS_FILE, 'r') as f:
        return EventLog.from_dict(json.load(f))


def _value_noise(rng: np.random.Generator, height: int, width: int, cell: int = 16) -> np.ndarray:
    """Low-frequency texture in [0, 1): coarse random grid, bilinear upsampled"""
    gh = height // cell + 2
    gw = width // cell + 2
    coarse = rng.random((gh, gw))
    rows = np.arange(height) / cell
    cols = np.arange(width) / cell
    grid_rows = np.arange(gh)
    grid_cols = np.arange(gw)
    tmp = np.stack([np.interp(cols, grid_cols, coarse[i]) for i in range(gh)])
    return np.stack([np.interp(rows, grid_rows, tmp[:, j]) for j in range(width)], axis=1)


def _disk(height: int, width: int, cr: int, cc: int, radius: int) -> np.ndarray:
    rr, cc_grid = np.ogrid[:height, :width]
    return (rr - cr) ** 2 + (cc_grid - cc) ** 2 <= radius ** 2


def _band_profiles(num_bands: int):
    """Background levels and urban signature per band (counts)"""
    idx = np.arange(num_bands)
    background = 900.0 + 150.0 * (idx % 4)
    urban = np.full(num_bands, 700.0)
    # the NIR-analog band (index 3 of each RGB-NIR group) carries the strongest urban response
    urban[idx % 4 == 3] = 1800.0
    return background, urban


def _place_rect(rng, height, width, size_range, taken, disjoint, kind):
    lo, hi = size_range
    if lo > height or lo > width:
        raise SynthError(f"placement failure: {kind} size range {size_range} exceeds image {height}x{width}")
    for _ in range(MAX_PLACEMENT_RETRIES):
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        if h > height or w > width:
            continue
        r = int(rng.integers(0, height - h + 1))
        c = int(rng.integers(0, width - w + 1))
        if disjoint and any(r < tr + th and tr < r + h and c < tc + tw and tc < c + w
                            for tr, tc, th, tw in taken):
            continue
        return r, c, h, w
    raise SynthError(f"placement failure: could not place {kind} event after {MAX_PLACEMENT_RETRIES} retries")


def _place_disk(rng, height, width, radius_range):
    lo, hi = radius_range
    for _ in range(MAX_PLACEMENT_RETRIES):
        radius = int(rng.integers(lo, hi + 1))
        if 2 * radius + 1 > height or 2 * radius + 1 > width:
            continue
        cr = int(rng.integers(radius, height - radius))
        cc = int(rng.integers(radius, width - radius))
        return cr, cc, radius
    raise SynthError(f"placement failure: cloud radius range {radius_range} does not fit {height}x{width}")


def synthetic_dates(params: SynthParams) -> List[str]:
    start = date.fromisoformat(params.start_date)
    return [(start + relativedelta(months=params.months_between_dates * t)).isoformat()
            for t in range(params.num_dates)]


def generate_scene(params: SynthParams) -> Tuple[Scene, EventLog]:
    """Generate one scene with its change mask and the log of every event drawn"""
    params.validate()
    rng = np.random.default_rng(params.seed)
    T, C, H, W = params.num_dates, params.num_bands, params.height, params.width
    background, urban_sig = _band_profiles(C)
    soil_sig = params.soil_similarity * urban_sig
    log = EventLog()

    # static land cover texture, one field per band
    texture = np.stack([_value_noise(rng, H, W) for _ in range(C)])
    base = background[:, None, None] * (0.6 + 0.8 * texture)

    seasonal_phase = rng.uniform(0, 2 * np.pi)
    seasons = 1.0 + params.seasonal_amplitude * np.sin(2 * np.pi * np.arange(T) / max(T, 4) + seasonal_phase)
    stack = np.stack([base * s for s in seasons]).astype(np.float64)

    all_bands = list(range(C))

    taken = []
    for _ in range(params.n_urban_events):
        r, c, h, w = _place_rect(rng, H, W, params.urban_size_range, taken, params.disjoint_urban, 'urban')
        taken.append((r, c, h, w))
        onset = int(rng.integers(1, T))
        stack[onset:, :, r:r + h, c:c + w] += urban_sig[None, :, None, None]
        log.events.append(Event(kind='urban', region=(r, c, h, w), onset=onset, bands=all_bands))

    for _ in range(params.n_soil_patches):
        r, c, h, w = _place_rect(rng, H, W, params.soil_size_range, [], False, 'soil')
        active = [int(x) for x in rng.integers(0, 2, size=T)]
        onset = active.index(1) if 1 in active else T
        for t in range(T):
            if active[t]:
                stack[t, :, r:r + h, c:c + w] += soil_sig[:, None, None]
        log.events.append(Event(kind='soil', region=(r, c, h, w), onset=onset, bands=all_bands,
                                active_dates=active))

    cloud_candidates = list(range(1, T - 1)) if params.cloud_dates == 'interior' else list(range(T))
    if params.n_cloud_events and not cloud_candidates:
        logger.warning(f"No interior dates for clouds with T={T}; skipping {params.n_cloud_events} cloud events")
    elif cloud_candidates:
        for _ in range(params.n_cloud_events):
            cr, cc, radius = _place_disk(rng, H, W, params.cloud_radius_range)
            t = int(rng.choice(cloud_candidates))
            disk = _disk(H, W, cr, cc, radius)
            stack[t][:, disk] += 4000.0
            log.events.append(Event(kind='cloud', region=(cr, cc, radius, 0), onset=t, bands=all_bands))
            if params.cloud_shadow:
                sr = min(max(cr + radius, radius), H - 1)
                sc = min(max(cc + radius, radius), W - 1)
                shadow = _disk(H, W, sr, sc, radius) & ~disk
                stack[t][:, shadow] *= 0.5
                log.events.append(Event(kind='shadow', region=(sr, sc, radius, 0), onset=t, bands=all_bands))

    if params.noise_std > 0:
        stack += rng.normal(0.0, params.noise_std, size=stack.shape)

    stack = np.rint(stack)
    clamped = int(np.count_nonzero((stack < 0) | (stack > UINT16_MAX)))
    if clamped:
        logger.warning(f"Clamped {clamped} pixel values to uint16 range in synthetic scene seed={params.seed}")
    log.clamped_pixels = clamped
    rasters = np.clip(stack, 0, UINT16_MAX).astype(np.uint16)

    manifest = SceneManifest(
        scene_id=f"synth-{params.seed:06d}",
        dates=synthetic_dates(params),
        band_names=default_band_names(C),
        height=H,
        width=W,
    )
    mask = ChangeMask(log.urban_mask(H, W))
    logger.debug(f"Generated {manifest.scene_id}: {len(log.of_kind('urban'))} urban, "
                 f"{len(log.of_kind('cloud'))} cloud, {len(log.of_kind('soil'))} soil events")
    return Scene(manifest=manifest, rasters=rasters, mask=mask), log


def write_scene(scene: Scene, log: EventLog, path) -> None:
    """Save a synthetic scene as a raster_store directory plus events.json"""
    save_scene(scene, path)
    save_events(log, path)


def _split_key(scene_id: str) -> str:
    return hashlib.sha256(scene_id.encode('utf-8')).hexdigest()


def split_scenes(scenes: Sequence[Scene], train_fraction: float) -> Tuple[List[Scene], List[Scene]]:
    """Deterministic disjoint split ordered by a hash of scene_id"""
    if not 0 < train_fraction < 1:
        raise SynthError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(scenes) < 2:
        raise SynthError(f"need at least 2 scenes to split, got {len(scenes)}")

    ordered = sorted(scenes, key=lambda s: _split_key(s.scene_id))
    n_train = min(max(int(round(len(ordered) * train_fraction)), 1), len(ordered) - 1)
    return ordered[:n_train], ordered[n_train:]


def split_synthetic(params_list: Sequence[SynthParams], train_fraction: float) -> Tuple[List[Scene], List[Scene]]:
    """Generate one scene per params entry and split them into train and test"""
    if not 0 < train_fraction < 1:
        raise SynthError(f"train_fraction must be in (0, 1), got {train_fraction}")
    scenes = [generate_scene(p)[0] for p in params_list]
    return split_scenes(scenes, train_fraction)
