"""Command-line entry points for cdnet"""

import dataclasses
import json
import logging
import sys
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
import numpy as np

from cdnet.config import Config
from cdnet.errors import CdnetError, ConfigError, SceneError
from cdnet.infer import (InferenceConfig, evaluate, metrics_from_counts, predict_scene,
                         render_comparison, save_png, threshold)
from cdnet.net import NetConfig, build
from cdnet.raster_store import MANIFEST_FILE, load_mask, load_scene, save_mask, scene_stats, subset_dates
from cdnet.sampler import (PatchSet, SamplerConfig, augment, extract_patches, load_patchset,
                           save_patchset)
from cdnet.synthgen import SynthParams, generate_scene, split_scenes, write_scene
from cdnet.trainer import Checkpoint, TrainConfig, make_folds, train, train_ensemble
from cdnet.utils.config_parser import ConfigParser, build_dataclass, check_value
from cdnet.utils.provenance import write_run_record

logger = logging.getLogger(__name__)

EXIT_CONFIG = 1
EXIT_MISSING_INPUT = 2
EXIT_RUNTIME = 3

# top-level keys accepted by each command's config file, besides 'seed', with
# their types; mapping sections are checked later by build_dataclass
SECTIONS = {
    'synth': {'synth': dict, 'num_scenes': int, 'train_fraction': float},
    'patches': {'scenes': List[str], 'scenes_dir': str, 'sampler': dict, 'augment': bool,
                'num_dates': Optional[int]},
    'train': {'patchset': str, 'net': dict, 'train': dict, 'holdout_fold': Optional[int]},
    'train-ensemble': {'patchset': str, 'net': dict, 'train': dict},
    'predict': {'checkpoints': List[str], 'checkpoint_dir': str, 'scene': str, 'inference': dict,
                'num_dates': Optional[int]},
    'eval': {'pred': str, 'gt': str},
    'render': {'pred': str, 'gt': str},
    'experiment': {'synth': dict, 'num_train_scenes': int, 'num_test_scenes': int, 'variants': List[str],
                   'num_dates': List[int], 'sampler': dict, 'net': dict, 'train': dict, 'inference': dict,
                   'ensemble': bool, 'seeds': List[int]},
}


def _require(config: Dict[str, Any], key: str):
    if key not in config or config[key] in (None, '', []):
        raise ConfigError(f"config invalid: missing required key '{key}'")
    return config[key]


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _scene_dirs(config: Dict[str, Any]) -> List[Path]:
    if config.get('scenes'):
        return [_existing(p, 'scene directory') for p in config['scenes']]
    root = _existing(_require(config, 'scenes_dir'), 'scenes directory')
    dirs = sorted(p.parent for p in root.rglob(MANIFEST_FILE))
    if not dirs:
        raise FileNotFoundError(f"no scene directories under {root}")
    return dirs


def _net_config(section: Optional[Dict[str, Any]], ps: PatchSet) -> NetConfig:
    """Fill in_channels and num_dates from the patch set when the config leaves them out"""
    section = dict(section or {})
    section.setdefault('in_channels', ps.pixels.shape[2])
    section.setdefault('num_dates', ps.num_dates)
    return build_dataclass(NetConfig, section, 'net')


def _train_config(section: Optional[Dict[str, Any]], seed: Optional[int]) -> TrainConfig:
    section = dict(section or {})
    section.setdefault('progress', Config.PROGRESS)
    train_cfg = build_dataclass(TrainConfig, section, 'train')
    if seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=seed)
    return train_cfg


def _synth_params(section: Optional[Dict[str, Any]]) -> SynthParams:
    """Scene seeds derive from the run seed, so the section may not set its own"""
    if isinstance(section, dict) and 'seed' in section:
        raise ConfigError("config invalid: synth.seed is derived from the run seed; "
                          "set the top-level seed instead")
    return build_dataclass(SynthParams, section, 'synth')


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def cmd_synth(config: Dict[str, Any], seed: int, out: Path) -> Dict[str, Any]:
    """Generate synthetic scenes split into out/train and out/test"""
    num_scenes = int(config.get('num_scenes', 10))
    train_fraction = float(config.get('train_fraction', 0.8))
    if num_scenes < 1:
        raise ConfigError(f"config invalid: num_scenes must be >= 1, got {num_scenes}")
    if not 0 < train_fraction < 1:
        raise ConfigError(f"config invalid: train_fraction must be in (0, 1), got {train_fraction}")
    base = _synth_params(config.get('synth'))

    generated = {}
    for i in range(num_scenes):
        scene, events = generate_scene(dataclasses.replace(base, seed=seed + i))
        generated[scene.scene_id] = (scene, events)

    scenes = [s for s, _ in generated.values()]
    if num_scenes >= 2:
        train_scenes, test_scenes = split_scenes(scenes, train_fraction)
    else:
        train_scenes, test_scenes = scenes, []

    for split, members in (('train', train_scenes), ('test', test_scenes)):
        for scene in members:
            write_scene(scene, generated[scene.scene_id][1], out / split / scene.scene_id)
    logger.info(f"Wrote {len(train_scenes)} train and {len(test_scenes)} test scenes to {out}")
    return {'train': [s.scene_id for s in train_scenes], 'test': [s.scene_id for s in test_scenes]}


def build_patchset(scenes, sampler_cfg: SamplerConfig, do_augment: bool = True):
    """Normalize with statistics of the given scenes, extract, then augment"""
    stats = scene_stats(scenes)
    parts = [extract_patches(s, sampler_cfg, stats) for s in scenes]
    ps = PatchSet.concat(parts)
    if do_augment:
        ps = augment(ps, sampler_cfg)
    return ps, stats


def cmd_patches(config: Dict[str, Any], seed: int, out: Path) -> Dict[str, Any]:
    """Extract the training patch inventory from labeled scenes"""
    sampler_cfg = build_dataclass(SamplerConfig, config.get('sampler'), 'sampler')
    scenes = [load_scene(d) for d in _scene_dirs(config)]
    if config.get('num_dates'):
        scenes = [subset_dates(s, int(config['num_dates'])) for s in scenes]

    ps, stats = build_patchset(scenes, sampler_cfg, bool(config.get('augment', True)))
    save_patchset(ps, out, sampler_cfg, stats)
    logger.info(f"Saved {len(ps)} patches (class counts {ps.class_counts}) to {out}")
    return {'patches': len(ps), 'class_counts': list(ps.class_counts)}


def cmd_train(config: Dict[str, Any], seed: Optional[int], out: Path) -> Dict[str, Any]:
    """Train one model; with holdout_fold set, that fold of the 5-fold plan is held out"""
    ps, stats = load_patchset(_existing(_require(config, 'patchset'), 'patch set'))
    net_cfg = _net_config(config.get('net'), ps)
    train_cfg = _train_config(config.get('train'), seed)

    holdout = config.get('holdout_fold')
    train_ps, heldout_ps = ps, None
    if holdout is not None:
        plan = make_folds(ps, train_cfg.folds, train_cfg.seed)
        if not 0 <= int(holdout) < plan.k:
            raise ConfigError(f"config invalid: holdout_fold must be in [0, {plan.k}), got {holdout}")
        train_ps = ps.subset(plan.train_indices(int(holdout)))
        heldout_ps = ps.subset(plan.heldout_indices(int(holdout)))

    model = build(net_cfg, train_cfg.seed)
    ckpt = train(net_cfg, model, train_ps, heldout_ps, train_cfg, band_stats=stats,
                 log_path=out / 'train_log.jsonl', heldout_fold=holdout)
    ckpt.save(out / 'model.pt')
    return {'final': ckpt.log[-1] if ckpt.log else None}


def cmd_train_ensemble(config: Dict[str, Any], seed: Optional[int], out: Path) -> Dict[str, Any]:
    """Train one model per fold run and write model_run<i>.pt plus folds.json"""
    ps, stats = load_patchset(_existing(_require(config, 'patchset'), 'patch set'))
    net_cfg = _net_config(config.get('net'), ps)
    train_cfg = _train_config(config.get('train'), seed)

    checkpoints = train_ensemble(net_cfg, ps, train_cfg, band_stats=stats, log_dir=out)
    for run, ckpt in enumerate(checkpoints):
        ckpt.save(out / f"model_run{run}.pt")
    _write_json(out / 'folds.json', make_folds(ps, train_cfg.folds, train_cfg.seed).to_dict())
    return {'runs': [c.log[-1] if c.log else None for c in checkpoints]}


def _checkpoint_paths(config: Dict[str, Any]) -> List[Path]:
    if config.get('checkpoints'):
        return [_existing(p, 'checkpoint') for p in config['checkpoints']]
    root = _existing(_require(config, 'checkpoint_dir'), 'checkpoint directory')
    paths = sorted(root.glob('*.pt'))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {root}")
    return paths


def _scene_for(scene, checkpoints: List[Checkpoint], num_dates: Optional[int]):
    """Match the scene's dates to what the ensemble was trained on"""
    if num_dates is None and checkpoints[0].net_config.variant == 'unet_plain':
        num_dates = checkpoints[0].net_config.num_dates
    if num_dates and num_dates != scene.manifest.num_dates:
        scene = subset_dates(scene, int(num_dates))
    return scene


def cmd_predict(config: Dict[str, Any], seed: Optional[int], out: Path) -> Dict[str, Any]:
    """Ensemble probability map plus thresholded mask for one scene"""
    infer_cfg = build_dataclass(InferenceConfig, config.get('inference'), 'inference')
    checkpoints = [Checkpoint.load(p) for p in _checkpoint_paths(config)]
    scene = load_scene(_existing(_require(config, 'scene'), 'scene directory'))
    scene = _scene_for(scene, checkpoints, config.get('num_dates'))

    pm = predict_scene(checkpoints, scene, infer_cfg.tile, infer_cfg.tile_stride, infer_cfg.batch_size)
    mask = threshold(pm, infer_cfg.threshold)
    pm.save(out)
    save_mask(mask, out)
    return {'scene_id': scene.scene_id, 'change_pixels': int(mask.labels.sum())}


def cmd_eval(config: Dict[str, Any], seed: Optional[int], out: Path) -> Dict[str, Any]:
    """Confusion counts and change-class metrics as metrics.json"""
    pred = load_mask(_existing(_require(config, 'pred'), 'prediction'))
    gt = load_mask(_existing(_require(config, 'gt'), 'ground truth'))
    report = evaluate(pred, gt)
    _write_json(out / 'metrics.json', report.to_dict())
    return report.to_dict()


def cmd_render(config: Dict[str, Any], seed: Optional[int], out: Path) -> Dict[str, Any]:
    """TP/TN/FP/FN comparison image as comparison.png"""
    pred = load_mask(_existing(_require(config, 'pred'), 'prediction'))
    gt = load_mask(_existing(_require(config, 'gt'), 'ground truth'))
    save_png(render_comparison(pred, gt), out / 'comparison.png')
    return {'height': gt.height, 'width': gt.width}


def _experiment_cell(variant: str, num_dates: int, train_scenes, test_scenes, config: Dict[str, Any],
                     seed: int, out: Path) -> Dict[str, Any]:
    sampler_cfg = build_dataclass(SamplerConfig, config.get('sampler'), 'sampler')
    infer_cfg = build_dataclass(InferenceConfig, config.get('inference'), 'inference')
    train_cfg = _train_config(config.get('train'), seed)

    train_t = [subset_dates(s, num_dates) for s in train_scenes]
    test_t = [subset_dates(s, num_dates) for s in test_scenes]
    ps, stats = build_patchset(train_t, sampler_cfg)

    net_section = dict(config.get('net') or {})
    net_section.update(variant=variant, num_dates=num_dates)
    net_cfg = _net_config(net_section, ps)

    if config.get('ensemble', False):
        checkpoints = train_ensemble(net_cfg, ps, train_cfg, band_stats=stats)
    else:
        checkpoints = [train(net_cfg, build(net_cfg, train_cfg.seed), ps, None, train_cfg, band_stats=stats)]

    # pooled confusion counts over all test scenes
    counts = np.zeros(4, dtype=np.int64)
    for scene in test_t:
        pm = predict_scene(checkpoints, scene, infer_cfg.tile, infer_cfg.tile_stride, infer_cfg.batch_size)
        r = evaluate(threshold(pm, infer_cfg.threshold), scene.mask)
        counts += (r.tp, r.fp, r.fn, r.tn)
    report = metrics_from_counts(*(int(c) for c in counts))

    cell_dir = out / f"{variant}_T{num_dates}_seed{seed}"
    _write_json(cell_dir / 'metrics.json', report.to_dict())
    logger.info(f"{variant} T={num_dates} seed={seed}: F1={report.f1:.4f} P={report.precision:.4f} "
                f"R={report.recall:.4f} OA={report.overall_accuracy:.4f}")
    return {'variant': variant, 'num_dates': num_dates, 'seed': seed, 'patches': len(ps),
            'metrics': report.to_dict()}


def cmd_experiment(config: Dict[str, Any], seed: int, out: Path) -> Dict[str, Any]:
    """
    Variant x number-of-dates grid on synthetic scenes, one MetricsReport per
    cell and seed, plus mean metrics per cell in experiment.json.
    """
    variants = list(config.get('variants', ['unet_plain', 'unet_lstm']))
    date_counts = [int(t) for t in config.get('num_dates', [2, 3, 5])]
    seeds = [int(s) for s in config.get('seeds', [seed])]
    n_train = int(config.get('num_train_scenes', 20))
    n_test = int(config.get('num_test_scenes', 5))
    base = _synth_params(config.get('synth'))

    if not variants or not date_counts or not seeds:
        raise ConfigError("config invalid: variants, num_dates and seeds must not be empty")
    if min(date_counts) < 2:
        raise ConfigError(f"config invalid: num_dates entries must be >= 2, got {min(date_counts)}")
    if n_train < 1 or n_test < 1:
        raise ConfigError("config invalid: num_train_scenes and num_test_scenes must be >= 1")
    if max(date_counts) > base.num_dates:
        raise ConfigError(f"config invalid: num_dates {max(date_counts)} exceeds synth.num_dates {base.num_dates}")
    for variant in variants:
        build_dataclass(NetConfig, {**(config.get('net') or {}), 'variant': variant}, 'net')

    cells = []
    for run_seed in seeds:
        # disjoint scene seeds for train and test
        offset = run_seed * 100_000
        train_scenes = [generate_scene(dataclasses.replace(base, seed=offset + i))[0] for i in range(n_train)]
        test_scenes = [generate_scene(dataclasses.replace(base, seed=offset + n_train + i))[0]
                       for i in range(n_test)]
        for num_dates in date_counts:
            for variant in variants:
                cells.append(_experiment_cell(variant, num_dates, train_scenes, test_scenes, config,
                                              run_seed, out))

    summary = []
    for num_dates in date_counts:
        for variant in variants:
            group = [c['metrics'] for c in cells if c['variant'] == variant and c['num_dates'] == num_dates]
            summary.append({
                'variant': variant,
                'num_dates': num_dates,
                'channels': base.num_bands,
                **{k: float(np.mean([g[k] for g in group]))
                   for k in ('precision', 'recall', 'overall_accuracy', 'f1')},
            })
    result = {'cells': cells, 'summary': summary}
    _write_json(out / 'experiment.json', result)
    return {'summary': summary}


def _emit_error(kind: str, message: str, code: int) -> None:
    click.echo(json.dumps({'error': kind, 'message': message, 'exit_code': code}), err=True)
    sys.exit(code)


def command_runner(name: str, seed_default: Optional[int] = 0):
    """
    Shared --config/--seed/--out handling: read and validate the config, run the
    command, write run.json, and map failures to exit codes with a JSON error.
    """
    def decorator(fn):
        @click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False),
                      help='Run configuration (JSON or YAML)')
        @click.option('--seed', type=int, default=None, help='Global seed (overrides the config)')
        @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default='out',
                      show_default=True, help='Output directory')
        @wraps(fn)
        def wrapper(config_path, seed, out_dir):
            try:
                key_types = {**SECTIONS[name], 'seed': int}
                raw = ConfigParser(config_path).load(set(key_types))
                config = {k: check_value(v, key_types[k], k) for k, v in raw.items()}
                if 'seeds' in config and (seed is not None or 'seed' in config):
                    raise ConfigError("config invalid: give either a seeds list or a single seed, not both")
                if seed is None:
                    seed = config.get('seed', seed_default)
                # the seeds actually used go into run.json
                recorded_seed = config['seeds'] if 'seeds' in config else seed
                out = Path(out_dir)
                out.mkdir(parents=True, exist_ok=True)
                logger.info(f"Running {name} (seed={recorded_seed}) -> {out}")
                summary = fn(config, seed, out)
                write_run_record(out, name, config, recorded_seed, config_path)
                logger.info(f"{name} finished: {json.dumps(summary, default=str)[:500]}")
            except ConfigError as e:
                _emit_error('config_invalid', str(e), EXIT_CONFIG)
            except FileNotFoundError as e:
                _emit_error('missing_input', str(e), EXIT_MISSING_INPUT)
            except SceneError as e:
                missing = str(e).startswith('incomplete scene')
                _emit_error('missing_input' if missing else 'runtime_failure', str(e),
                            EXIT_MISSING_INPUT if missing else EXIT_RUNTIME)
            except (CdnetError, OSError, RuntimeError, ValueError) as e:
                logger.error(f"{name} failed: {str(e)}")
                _emit_error('runtime_failure', str(e), EXIT_RUNTIME)
            except Exception as e:
                logger.exception(f"{name} failed unexpectedly: {str(e)}")
                _emit_error('runtime_failure', f"{type(e).__name__}: {str(e)}", EXIT_RUNTIME)
        return wrapper
    return decorator


@click.group(name='cdnet')
@click.option('--log-level', default=None, help='Overrides CDNET_LOG_LEVEL')
@click.option('--log-file', default=None, type=click.Path(dir_okay=False), help='Also log to this file')
def cli(log_level, log_file):
    """Recurrent fully-convolutional urban change detection"""
    from cdnet import configure
    configure(log_level, log_file)


@cli.command('synth')
@command_runner('synth')
def synth_command(config, seed, out):
    """Generate synthetic multi-date scenes"""
    return cmd_synth(config, seed, out)


@cli.command('patches')
@command_runner('patches')
def patches_command(config, seed, out):
    """Extract and augment training patches"""
    return cmd_patches(config, seed, out)


@cli.command('train')
@command_runner('train', seed_default=None)
def train_command(config, seed, out):
    """Train a single model"""
    return cmd_train(config, seed, out)


@cli.command('train-ensemble')
@command_runner('train-ensemble', seed_default=None)
def train_ensemble_command(config, seed, out):
    """Train the 5-fold ensemble"""
    return cmd_train_ensemble(config, seed, out)


@cli.command('predict')
@command_runner('predict', seed_default=None)
def predict_command(config, seed, out):
    """Predict a change map for one scene"""
    return cmd_predict(config, seed, out)


@cli.command('eval')
@command_runner('eval', seed_default=None)
def eval_command(config, seed, out):
    """Compute change-class metrics"""
    return cmd_eval(config, seed, out)


@cli.command('render')
@command_runner('render', seed_default=None)
def render_command(config, seed, out):
    """Render a TP/TN/FP/FN comparison PNG"""
    return cmd_render(config, seed, out)


@cli.command('experiment')
@command_runner('experiment')
def experiment_command(config, seed, out):
    """Run the variant x dates ablation grid on synthetic data"""
    return cmd_experiment(config, seed, out)
