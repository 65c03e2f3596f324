"""Whole-scene tiled prediction, thresholding, change-class metrics and comparison rendering"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import torch
from PIL import Image
from sklearn.metrics import confusion_matrix

from cdnet.errors import InferenceError
from cdnet.raster_store import ChangeMask, Scene, scene_stats
from cdnet.sampler import normalize

logger = logging.getLogger(__name__)

PROBABILITY_FILE = 'probability.raw'
PROBABILITY_SIDECAR = 'probability.json'

COLOR_TP = (255, 255, 255)
COLOR_TN = (0, 0, 0)
COLOR_FP = (255, 0, 0)
COLOR_FN = (0, 255, 0)


@dataclass
class InferenceConfig:
    tile: int = 32
    tile_stride: int = 16
    threshold: float = 0.5
    batch_size: int = 64

    def validate(self) -> None:
        if self.tile < 1 or self.tile_stride < 1:
            raise InferenceError(f"tile and tile_stride must be >= 1, got {self.tile}/{self.tile_stride}")
        if not 0 < self.threshold < 1:
            raise InferenceError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.batch_size < 1:
            raise InferenceError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class ProbabilityMap:
    p_change: np.ndarray  # (H, W) float32 in [0, 1]

    def __post_init__(self):
        if self.p_change.ndim != 2:
            raise InferenceError(f"probability map must be 2-D, got {self.p_change.shape}")
        if self.p_change.size and (self.p_change.min() < 0 or self.p_change.max() > 1):
            raise InferenceError("probability map values outside [0, 1]")

    @property
    def height(self) -> int:
        return self.p_change.shape[0]

    @property
    def width(self) -> int:
        return self.p_change.shape[1]

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / PROBABILITY_FILE).write_bytes(np.ascontiguousarray(self.p_change, dtype='<f4').tobytes())
        with open(path / PROBABILITY_SIDECAR, 'w') as f:
            json.dump({'height': self.height, 'width': self.width, 'dtype': 'float32'}, f, indent=2)
            f.write('\n')

    @classmethod
    def load(cls, path) -> 'ProbabilityMap':
        path = Path(path)
        if not (path / PROBABILITY_SIDECAR).exists():
            raise FileNotFoundError(f"probability map not found in {path}")
        with open(path / PROBABILITY_SIDECAR, 'r') as f:
            dims = json.load(f)
        data = np.frombuffer((path / PROBABILITY_FILE).read_bytes(), dtype='<f4')
        return cls(data.reshape(dims['height'], dims['width']).astype(np.float32))


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    overall_accuracy: float
    # False when the denominator was zero and the value was reported as 0
    precision_defined: bool = True
    recall_defined: bool = True

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def tile_origins(size: int, tile: int, stride: int) -> List[int]:
    """Stride grid along one axis, with a final tile flush against the far edge"""
    if size < tile:
        raise InferenceError(f"image size {size} is smaller than tile {tile}")
    origins = list(range(0, size - tile + 1, stride))
    if origins[-1] != size - tile:
        origins.append(size - tile)
    return origins


def _model_input(scene: Scene, checkpoint) -> np.ndarray:
    stats = checkpoint.band_stats
    if stats is None:
        logger.warning(f"Checkpoint carries no band statistics; normalizing {scene.scene_id} with its own")
        stats = scene_stats([scene])
    return normalize(scene.rasters, stats, scene.manifest.band_names)


def _predict_single(model, pixels: np.ndarray, cfg: InferenceConfig) -> np.ndarray:
    """Coverage-averaged change probability of one model over every tile"""
    _, _, height, width = pixels.shape
    rows = tile_origins(height, cfg.tile, cfg.tile_stride)
    cols = tile_origins(width, cfg.tile, cfg.tile_stride)
    positions = [(r, c) for r in rows for c in cols]

    acc = np.zeros((height, width), dtype=np.float64)
    coverage = np.zeros((height, width), dtype=np.float64)
    tensor = torch.from_numpy(pixels)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(positions), cfg.batch_size):
            batch_pos = positions[start:start + cfg.batch_size]
            batch = torch.stack([tensor[:, :, r:r + cfg.tile, c:c + cfg.tile] for r, c in batch_pos])
            probs = model(batch)[:, 1].numpy()
            # fixed accumulation order keeps the output bit-stable
            for (r, c), p in zip(batch_pos, probs):
                acc[r:r + cfg.tile, c:c + cfg.tile] += p
                coverage[r:r + cfg.tile, c:c + cfg.tile] += 1.0
    return (acc / coverage).astype(np.float32)


def predict_scene(checkpoints: Sequence, scene: Scene, tile: int = 32, tile_stride: int = 16,
                  batch_size: int = 64) -> ProbabilityMap:
    """Tiled prediction per checkpoint, then a uniform average across checkpoints"""
    cfg = InferenceConfig(tile=tile, tile_stride=tile_stride, batch_size=batch_size)
    cfg.validate()
    if not checkpoints:
        raise InferenceError("empty checkpoint list")
    reference = checkpoints[0].net_config
    for ckpt in checkpoints[1:]:
        if ckpt.net_config != reference:
            raise InferenceError(f"checkpoint config mismatch: {ckpt.net_config} != {reference}")
    m = scene.manifest
    if m.height < tile or m.width < tile:
        raise InferenceError(f"scene {m.scene_id} ({m.height}x{m.width}) is smaller than tile {tile}")

    maps = []
    for i, ckpt in enumerate(checkpoints):
        pixels = _model_input(scene, ckpt)
        maps.append(_predict_single(ckpt.to_model(), pixels, cfg))
        logger.debug(f"Checkpoint {i + 1}/{len(checkpoints)} done for {m.scene_id}")

    # sorting along the ensemble axis makes the sum independent of checkpoint order
    stacked = np.sort(np.stack(maps).astype(np.float64), axis=0)
    mean = (stacked.sum(axis=0) / len(maps)).astype(np.float32)
    logger.info(f"Predicted {m.scene_id} with {len(checkpoints)} checkpoint(s)")
    return ProbabilityMap(np.clip(mean, 0.0, 1.0))


def threshold_array(p: np.ndarray, tau: float = 0.5) -> np.ndarray:
    return (p > tau).astype(np.uint8)


def threshold(pm: ProbabilityMap, tau: float = 0.5) -> ChangeMask:
    """Label 1 where p_change > tau; ties go to no-change"""
    if not 0 < tau < 1:
        raise InferenceError(f"threshold must be in (0, 1), got {tau}")
    return ChangeMask(threshold_array(pm.p_change, tau))


def _check_shapes(pred: ChangeMask, gt: ChangeMask) -> None:
    if pred.labels.shape != gt.labels.shape:
        raise InferenceError(f"shape mismatch: prediction {pred.labels.shape} vs ground truth {gt.labels.shape}")


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> MetricsReport:
    """Derived change-class metrics; an undefined ratio is reported as 0 and flagged"""
    precision_defined = tp + fp > 0
    recall_defined = tp + fn > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn) if recall_defined else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    total = tp + fp + fn + tn
    overall_accuracy = (tp + tn) / total if total else 0.0
    if not precision_defined:
        logger.debug("No positive predictions; precision reported as 0")
    return MetricsReport(tp=tp, fp=fp, fn=fn, tn=tn, precision=precision, recall=recall, f1=f1,
                         overall_accuracy=overall_accuracy, precision_defined=precision_defined,
                         recall_defined=recall_defined)


def evaluate(pred: ChangeMask, gt: ChangeMask) -> MetricsReport:
    """Confusion counts and change-class precision, recall, F1 plus overall accuracy"""
    _check_shapes(pred, gt)
    tn, fp, fn, tp = (int(v) for v in confusion_matrix(gt.labels.ravel(), pred.labels.ravel(),
                                                        labels=[0, 1]).ravel())
    return metrics_from_counts(tp, fp, fn, tn)


def render_comparison(pred: ChangeMask, gt: ChangeMask) -> np.ndarray:
    """RGB (H, W, 3) uint8: TP white, TN black, FP red, FN green"""
    _check_shapes(pred, gt)
    p = pred.labels.astype(bool)
    g = gt.labels.astype(bool)
    image = np.zeros(p.shape + (3,), dtype=np.uint8)
    image[p & g] = COLOR_TP
    image[p & ~g] = COLOR_FP
    image[~p & g] = COLOR_FN
    return image


def save_png(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format='PNG')
