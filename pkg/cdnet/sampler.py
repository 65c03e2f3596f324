"""
Training patch inventory: change-aware dual-stride extraction, threshold-gated
dihedral augmentation, inverse-frequency class weights and normalization.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from cdnet.errors import SamplerError
from cdnet.raster_store import BandStats, Scene, scene_stats

logger = logging.getLogger(__name__)

NORM_EPS = 1e-6
DIHEDRAL_ORDER = 8
PATCHES_BIN = 'patches.bin'
LABELS_BIN = 'labels.bin'
PATCHES_INDEX = 'patches.json'


@dataclass
class SamplerConfig:
    patch_size: int = 32
    stride_change: int = 6
    stride_nochange: int = 32
    aug_threshold: float = 0.05

    def validate(self) -> None:
        if self.patch_size < 1:
            raise SamplerError(f"patch_size must be >= 1, got {self.patch_size}")
        for name in ('stride_change', 'stride_nochange'):
            stride = getattr(self, name)
            if not 1 <= stride <= self.patch_size:
                raise SamplerError(f"{name} must be in [1, {self.patch_size}], got {stride}")
        if not 0 <= self.aug_threshold <= 1:
            raise SamplerError(f"aug_threshold must be in [0, 1], got {self.aug_threshold}")

    def to_dict(self):
        return asdict(self)


class PatchOrigin(NamedTuple):
    scene_id: str
    row: int
    col: int
    transform_id: int = 0


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray  # (T, C, P, P) float32, normalized
    labels: np.ndarray  # (P, P) uint8
    origin: PatchOrigin


@dataclass(frozen=True)
class ClassWeights:
    w_nochange: float
    w_change: float

    def as_tuple(self) -> Tuple[float, float]:
        return self.w_nochange, self.w_change

    def to_dict(self):
        return {'w_nochange': self.w_nochange, 'w_change': self.w_change}


class PatchSet:
    """
    Patches stored as stacked arrays: pixels (N, T, C, P, P) float32,
    labels (N, P, P) uint8, one origin per patch.
    """

    def __init__(self, pixels: np.ndarray, labels: np.ndarray, origins: Sequence[PatchOrigin],
                 band_names: Sequence[str] = ()):
        if len(pixels) != len(labels) or len(labels) != len(origins):
            raise SamplerError(f"patch set arrays disagree: {len(pixels)} pixels, {len(labels)} labels, "
                               f"{len(origins)} origins")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise SamplerError("patch labels must be binary")
        self.pixels = pixels.astype(np.float32, copy=False)
        self.labels = labels.astype(np.uint8, copy=False)
        self.origins = [PatchOrigin(*o) for o in origins]
        self.band_names = list(band_names)
        n_change = int(self.labels.sum(dtype=np.int64))
        self.class_counts = (int(self.labels.size) - n_change, n_change)

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i: int) -> Patch:
        return Patch(pixels=self.pixels[i], labels=self.labels[i], origin=self.origins[i])

    @property
    def patches(self) -> Iterator[Patch]:
        return (self[i] for i in range(len(self)))

    @property
    def num_dates(self) -> int:
        return self.pixels.shape[1]

    def subset(self, indices) -> 'PatchSet':
        indices = np.asarray(indices, dtype=np.int64)
        return PatchSet(self.pixels[indices], self.labels[indices],
                        [self.origins[i] for i in indices], self.band_names)

    @classmethod
    def concat(cls, sets: Sequence['PatchSet']) -> 'PatchSet':
        """Merge sets in deterministic (scene_id, row, col, transform_id) order"""
        if not sets:
            raise SamplerError("nothing to concatenate")
        pixels = np.concatenate([s.pixels for s in sets])
        labels = np.concatenate([s.labels for s in sets])
        origins = [o for s in sets for o in s.origins]
        order = sorted(range(len(origins)), key=lambda i: origins[i])
        return cls(pixels[order], labels[order], [origins[i] for i in order], sets[0].band_names)


def normalize(raw: np.ndarray, stats: BandStats, band_names: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    Per-band standardization (x - mean_b) / max(std_b, eps). The band axis is
    the third from last: (..., C, H, W).
    """
    band_names = list(band_names) if band_names is not None else list(stats.band_names)
    try:
        idx = [stats.band_names.index(b) for b in band_names]
    except ValueError as e:
        raise SamplerError(f"unknown band: {str(e)}") from e
    if raw.shape[-3] != len(band_names):
        raise SamplerError(f"band axis has {raw.shape[-3]} entries, expected {len(band_names)}")

    mean = stats.mean[idx][:, None, None]
    std = np.maximum(stats.std[idx], NORM_EPS)[:, None, None]
    return ((raw.astype(np.float64) - mean) / std).astype(np.float32)


def _window_sums(mask: np.ndarray, size: int) -> np.ndarray:
    """Change-pixel count of every size x size window, indexed by top-left corner"""
    integral = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    return (integral[size:, size:] - integral[:-size, size:]
            - integral[size:, :-size] + integral[:-size, :-size])


def patch_positions(mask: np.ndarray, cfg: SamplerConfig) -> List[Tuple[int, int]]:
    """
    Window corners kept for training: stride_change grid windows holding any
    change plus stride_nochange grid windows holding none.
    """
    size = cfg.patch_size
    sums = _window_sums(mask, size)
    max_row, max_col = sums.shape[0] - 1, sums.shape[1] - 1

    positions = set()
    for r in range(0, max_row + 1, cfg.stride_change):
        for c in range(0, max_col + 1, cfg.stride_change):
            if sums[r, c] > 0:
                positions.add((r, c))
    for r in range(0, max_row + 1, cfg.stride_nochange):
        for c in range(0, max_col + 1, cfg.stride_nochange):
            if sums[r, c] == 0:
                positions.add((r, c))
    return sorted(positions)


def extract_patches(scene: Scene, cfg: SamplerConfig, stats: Optional[BandStats] = None) -> PatchSet:
    """Cut normalized training windows out of a labeled scene"""
    cfg.validate()
    if scene.mask is None:
        raise SamplerError(f"scene {scene.scene_id} has no mask")
    m = scene.manifest
    if m.height < cfg.patch_size or m.width < cfg.patch_size:
        raise SamplerError(f"scene {scene.scene_id} ({m.height}x{m.width}) is smaller than patch size {cfg.patch_size}")

    if stats is None:
        stats = scene_stats([scene])
    pixels = normalize(scene.rasters, stats, m.band_names)
    labels = scene.mask.labels

    size = cfg.patch_size
    positions = patch_positions(labels, cfg)
    patch_pixels = np.stack([pixels[:, :, r:r + size, c:c + size] for r, c in positions])
    patch_labels = np.stack([labels[r:r + size, c:c + size] for r, c in positions])
    origins = [PatchOrigin(m.scene_id, r, c, 0) for r, c in positions]

    logger.info(f"Extracted {len(origins)} patches from {m.scene_id}")
    return PatchSet(patch_pixels, patch_labels, origins, m.band_names)


def dihedral(array: np.ndarray, k: int) -> np.ndarray:
    """
    Apply dihedral element k to the last two axes.
    0 identity, 1-3 rotations by 90/180/270, 4 left-right flip, 5 up-down flip,
    6 transpose, 7 anti-transpose.
    """
    if k == 0:
        out = array
    elif k in (1, 2, 3):
        out = np.rot90(array, k, axes=(-2, -1))
    elif k == 4:
        out = np.flip(array, axis=-1)
    elif k == 5:
        out = np.flip(array, axis=-2)
    elif k == 6:
        out = np.swapaxes(array, -1, -2)
    elif k == 7:
        out = np.rot90(np.swapaxes(array, -1, -2), 2, axes=(-2, -1))
    else:
        raise SamplerError(f"transform_id must be in 0..7, got {k}")
    return np.ascontiguousarray(out)


def dihedral_inverse(k: int) -> int:
    return {1: 3, 3: 1}.get(k, k)


def augment(ps: PatchSet, cfg: SamplerConfig) -> PatchSet:
    """
    Add the 7 non-identity dihedral variants of every untransformed patch whose
    change fraction exceeds cfg.aug_threshold.
    """
    pixels, labels, origins = [ps.pixels], [ps.labels], list(ps.origins)
    area = ps.labels.shape[-1] * ps.labels.shape[-2] if len(ps) else 1

    n_augmented = 0
    for i, origin in enumerate(ps.origins):
        if origin.transform_id != 0:
            continue
        if ps.labels[i].sum() / area <= cfg.aug_threshold:
            continue
        n_augmented += 1
        for k in range(1, DIHEDRAL_ORDER):
            pixels.append(dihedral(ps.pixels[i], k)[None])
            labels.append(dihedral(ps.labels[i], k)[None])
            origins.append(origin._replace(transform_id=k))

    logger.info(f"Augmented {n_augmented} of {len(ps)} patches above change fraction {cfg.aug_threshold}")
    merged = PatchSet(np.concatenate(pixels), np.concatenate(labels), origins, ps.band_names)
    return PatchSet.concat([merged])


def compute_class_weights(ps: PatchSet) -> ClassWeights:
    """Weights proportional to 1 / class pixel count, scaled to sum to 2"""
    n_nochange, n_change = ps.class_counts
    if n_nochange == 0 or n_change == 0:
        raise SamplerError(f"degenerate class balance: counts {ps.class_counts}")
    inv_nochange, inv_change = 1.0 / n_nochange, 1.0 / n_change
    total = inv_nochange + inv_change
    return ClassWeights(w_nochange=2.0 * inv_nochange / total, w_change=2.0 * inv_change / total)


def save_patchset(ps: PatchSet, path, cfg: Optional[SamplerConfig] = None,
                  stats: Optional[BandStats] = None) -> None:
    """patches.bin (float32 pixels), labels.bin (uint8 labels) and patches.json index"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / PATCHES_BIN).write_bytes(np.ascontiguousarray(ps.pixels, dtype='<f4').tobytes())
    (path / LABELS_BIN).write_bytes(np.ascontiguousarray(ps.labels, dtype=np.uint8).tobytes())
    index = {
        'shape': list(ps.pixels.shape),
        'band_names': ps.band_names,
        'class_counts': list(ps.class_counts),
        'origins': [list(o) for o in ps.origins],
        'config': cfg.to_dict() if cfg else None,
        'band_stats': stats.to_dict() if stats else None,
    }
    with open(path / PATCHES_INDEX, 'w') as f:
        json.dump(index, f, indent=2)
        f.write('\n')


def load_patchset(path) -> Tuple[PatchSet, Optional[BandStats]]:
    path = Path(path)
    for name in (PATCHES_BIN, LABELS_BIN, PATCHES_INDEX):
        if not (path / name).exists():
            raise FileNotFoundError(f"patch set file not found: {path / name}")
    with open(path / PATCHES_INDEX, 'r') as f:
        index = json.load(f)

    shape = tuple(index['shape'])
    pixels = np.frombuffer((path / PATCHES_BIN).read_bytes(), dtype='<f4').reshape(shape).copy()
    labels = np.frombuffer((path / LABELS_BIN).read_bytes(), dtype=np.uint8).reshape(shape[0], *shape[3:]).copy()
    ps = PatchSet(pixels, labels, [PatchOrigin(*o) for o in index['origins']], index.get('band_names') or ())
    if tuple(index['class_counts']) != ps.class_counts:
        raise SamplerError(f"class counts in {PATCHES_INDEX} disagree with labels.bin")
    stats = BandStats.from_dict(index['band_stats']) if index.get('band_stats') else None
    return ps, stats
