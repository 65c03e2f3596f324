"""Weighted-loss optimization, 5-fold partitioning and ensemble training"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from cdnet.errors import TrainingError
from cdnet.infer import evaluate, threshold_array
from cdnet.net import ChangeNet, NetConfig, build
from cdnet.raster_store import BandStats, ChangeMask
from cdnet.sampler import ClassWeights, PatchSet, compute_class_weights

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = 'cdnet-checkpoint/1'


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    seed: int = 0
    # None: inverse-frequency weights from the training patches
    class_weights: Optional[ClassWeights] = None
    use_class_weights: bool = True
    folds: int = 5
    eval_batch_size: int = 256
    progress: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if isinstance(self.class_weights, dict):
            self.class_weights = ClassWeights(**self.class_weights)
        elif isinstance(self.class_weights, (list, tuple)):
            self.class_weights = ClassWeights(*self.class_weights)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        if self.folds < 2:
            raise TrainingError(f"folds must be >= 2, got {self.folds}")
        if self.class_weights is not None and min(self.class_weights.as_tuple()) <= 0:
            raise TrainingError(f"class weights must be positive, got {self.class_weights}")

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d['betas'] = list(self.betas)
        d['class_weights'] = self.class_weights.to_dict() if self.class_weights else None
        return d


def weighted_loss(probs: torch.Tensor, labels: torch.Tensor, weights: Union[ClassWeights, Tuple[float, float]],
                  pixel_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Mean over pixels of w_y * -log p_y. probs is (K, H, W) or (N, K, H, W),
    labels the matching (H, W) or (N, H, W) class indices.
    """
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
        labels = labels.unsqueeze(0)
        if pixel_weights is not None:
            pixel_weights = pixel_weights.unsqueeze(0)
    if probs.shape[0] != labels.shape[0] or probs.shape[2:] != labels.shape[1:]:
        raise TrainingError(f"probabilities {tuple(probs.shape)} and labels {tuple(labels.shape)} disagree")

    labels = labels.long()
    class_weights = weights.as_tuple() if isinstance(weights, ClassWeights) else tuple(weights)
    w = probs.new_tensor(class_weights)[labels]
    if pixel_weights is not None:
        w = w * pixel_weights

    p_true = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    floored = p_true < PROB_FLOOR
    if bool(floored.any()):
        logger.warning(f"Clamped {int(floored.sum())} labeled-class probabilities to {PROB_FLOOR}")
    return (w * -torch.log(p_true.clamp_min(PROB_FLOOR))).mean()


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray
    runs: List[Tuple[Tuple[int, ...], int]]

    def fold_sizes(self) -> List[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()

    def heldout_indices(self, run: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == self.runs[run][1])

    def train_indices(self, run: int) -> np.ndarray:
        return np.flatnonzero(np.isin(self.assignments, self.runs[run][0]))

    def to_dict(self):
        return {'k': self.k, 'assignments': self.assignments.tolist(),
                'runs': [{'train_folds': list(tr), 'heldout_fold': ho} for tr, ho in self.runs]}


def make_folds(ps: Union[PatchSet, int], k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then round-robin fold assignment; run i holds out fold i"""
    n = ps if isinstance(ps, int) else len(ps)
    if k < 2:
        raise TrainingError(f"need k >= 2 folds, got {k}")
    if n < k:
        raise TrainingError(f"too few patches for {k} folds: {n}")

    order = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    runs = [(tuple(f for f in range(k) if f != held), held) for held in range(k)]
    return FoldPlan(k=k, assignments=assignments, runs=runs)


@dataclass
class Checkpoint:
    state_dict: Dict[str, torch.Tensor]
    net_config: NetConfig
    train_config: TrainConfig
    seed: int
    log: List[Dict[str, Any]] = field(default_factory=list)
    band_stats: Optional[BandStats] = None
    heldout_fold: Optional[int] = None

    def header(self) -> Dict[str, Any]:
        return {
            'format': CHECKPOINT_FORMAT,
            'net_config': self.net_config.to_dict(),
            'train_config': self.train_config.to_dict(),
            'seed': self.seed,
            'log': self.log,
            'band_stats': self.band_stats.to_dict() if self.band_stats else None,
            'heldout_fold': self.heldout_fold,
        }

    def to_model(self) -> ChangeNet:
        model = build(self.net_config, self.seed)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({'header': json.dumps(self.header(), sort_keys=True), 'state_dict': self.state_dict}, path)

    @classmethod
    def load(cls, path) -> 'Checkpoint':
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        archive = torch.load(path, map_location='cpu', weights_only=True)
        header = json.loads(archive['header'])
        if header.get('format') != CHECKPOINT_FORMAT:
            raise TrainingError(f"unsupported checkpoint format in {path}: {header.get('format')}")
        return cls(
            state_dict=dict(archive['state_dict']),
            net_config=NetConfig(**header['net_config']),
            train_config=TrainConfig(**header['train_config']),
            seed=int(header['seed']),
            log=header.get('log') or [],
            band_stats=BandStats.from_dict(header['band_stats']) if header.get('band_stats') else None,
            heldout_fold=header.get('heldout_fold'),
        )


def _tensors(ps: PatchSet) -> Tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(ps.pixels), torch.from_numpy(ps.labels.astype(np.int64))


def predict_patches(model: ChangeNet, ps: PatchSet, batch_size: int = 256) -> np.ndarray:
    """Change probabilities (N, P, P) in eval mode"""
    model.eval()
    pixels, _ = _tensors(ps)
    out = []
    with torch.no_grad():
        for start in range(0, len(ps), batch_size):
            out.append(model(pixels[start:start + batch_size])[:, 1].numpy())
    return np.concatenate(out) if out else np.zeros((0,) + ps.labels.shape[1:], dtype=np.float32)


def heldout_f1(model: ChangeNet, ps: PatchSet, batch_size: int = 256) -> float:
    probs = predict_patches(model, ps, batch_size)
    pred = ChangeMask(threshold_array(probs).reshape(-1, probs.shape[-1]))
    gt = ChangeMask(ps.labels.reshape(-1, ps.labels.shape[-1]))
    return evaluate(pred, gt).f1


def train(net_cfg: NetConfig, model: ChangeNet, train_ps: PatchSet, heldout_ps: Optional[PatchSet],
          train_cfg: TrainConfig, band_stats: Optional[BandStats] = None, log_path=None,
          heldout_fold: Optional[int] = None) -> Checkpoint:
    """Run shuffled mini-batch Adam on the weighted loss and return the final-epoch checkpoint"""
    train_cfg.validate()
    if len(train_ps) == 0:
        raise TrainingError("empty training patch set")
    if train_ps.pixels.shape[2] != net_cfg.in_channels:
        raise TrainingError(f"patches have {train_ps.pixels.shape[2]} bands, network expects {net_cfg.in_channels}")

    if not train_cfg.use_class_weights:
        weights = ClassWeights(1.0, 1.0)
    elif train_cfg.class_weights is not None:
        weights = train_cfg.class_weights
    else:
        weights = compute_class_weights(train_ps)
    logger.info(f"Training {net_cfg.variant} on {len(train_ps)} patches for {train_cfg.epochs} epochs "
                f"(weights {weights.w_nochange:.4f}/{weights.w_change:.4f}, seed={train_cfg.seed})")

    pixels, labels = _tensors(train_ps)
    generator = torch.Generator().manual_seed(train_cfg.seed)
    loader = DataLoader(TensorDataset(pixels, labels), batch_size=train_cfg.batch_size,
                        shuffle=True, generator=generator)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                                 betas=train_cfg.betas, eps=train_cfg.eps)

    log_file = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, 'w')

    history = []
    try:
        for epoch in tqdm(range(train_cfg.epochs), desc=f"{net_cfg.variant} seed={train_cfg.seed}",
                          disable=not train_cfg.progress):
            model.train()
            total, seen = 0.0, 0
            for batch_x, batch_y in loader:
                optimizer.zero_grad(set_to_none=True)
                loss = weighted_loss(model(batch_x), batch_y, weights)
                if not torch.isfinite(loss):
                    logger.error(f"Non-finite loss at epoch {epoch + 1} (seed={train_cfg.seed})")
                    raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch + 1}; "
                                        f"lr={train_cfg.learning_rate}, batch={len(batch_x)}")
                loss.backward()
                optimizer.step()
                total += loss.item() * len(batch_x)
                seen += len(batch_x)

            entry = {'epoch': epoch + 1, 'loss': total / seen, 'heldout_f1': None}
            if heldout_ps is not None and len(heldout_ps):
                entry['heldout_f1'] = heldout_f1(model, heldout_ps, train_cfg.eval_batch_size)
            history.append(entry)
            logger.debug(f"epoch {entry['epoch']}: loss={entry['loss']:.6f} heldout_f1={entry['heldout_f1']}")
            if log_file:
                log_file.write(json.dumps(entry) + '\n')
    finally:
        if log_file:
            log_file.close()

    model.eval()
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state_dict=state, net_config=net_cfg, train_config=train_cfg, seed=train_cfg.seed,
                      log=history, band_stats=band_stats, heldout_fold=heldout_fold)


def train_ensemble(net_cfg: NetConfig, ps: PatchSet, train_cfg: TrainConfig,
                   band_stats: Optional[BandStats] = None, log_dir=None) -> List[Checkpoint]:
    """
    One model per fold run. Run i initializes and shuffles with seed + i and
    holds out fold i.
    """
    train_cfg.validate()
    plan = make_folds(ps, train_cfg.folds, train_cfg.seed)
    logger.info(f"Fold sizes: {plan.fold_sizes()}")

    if train_cfg.use_class_weights and train_cfg.class_weights is None:
        train_cfg = dataclasses.replace(train_cfg, class_weights=compute_class_weights(ps))

    checkpoints = []
    for run, (_, held) in enumerate(plan.runs):
        run_cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + run)
        model = build(net_cfg, run_cfg.seed)
        log_path = Path(log_dir) / f"train_log_run{run}.jsonl" if log_dir else None
        ckpt = train(net_cfg, model, ps.subset(plan.train_indices(run)), ps.subset(plan.heldout_indices(run)),
                     run_cfg, band_stats=band_stats, log_path=log_path, heldout_fold=held)
        checkpoints.append(ckpt)
        final = ckpt.log[-1] if ckpt.log else {}
        logger.info(f"Run {run} (held-out fold {held}) finished: {final}")
    return checkpoints
