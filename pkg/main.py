"""
Command-line entry point for the glyph-conditional diffusion toolkit.

Commands:
    gen-dataset  render the synthetic universe into train/ and test/ corpora
    train        fit the denoiser on seen categories (periodic checkpoints, CSV loss log)
    sample       category x sample grid with classifier-free guidance
    interpolate  category x lambda grid between two writers
    eval         zero-shot recognition experiment (+ optional guidance sweep, writer-mode comparison)

Every command writes resolved_config.yaml and VERSION beside its outputs.
Exit codes: 0 success, 2 configuration error, 3 runtime error.

Usage:
    python main.py gen-dataset --out data/desk
    python main.py train --config runs/desk.yaml --set train.steps=2000 --out runs/desk
    python main.py sample --set paths.checkpoint=runs/desk/checkpoints/final.npz --set sampling.gamma=2
"""

import functools
import logging
import sys
from pathlib import Path
from typing import List, Tuple

import click
import numpy as np
import pandas as pd
import torch
from PIL import Image

from central_config import (
    TOOL_VERSION,
    CentralConfigManager,
    ConfigError,
    RunConfig,
    save_resolved_config,
    seed_everything,
    setup_logging,
)
from denoiser import (
    DenoiserTrainer,
    GlyphUNet,
    ParameterStore,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from evalx import (
    DiffusionSampleSource,
    RealImageSource,
    augmentation_experiment,
    guidance_sweep,
    train_classifier,
    write_report,
    writer_mode_experiment,
    zero_shot_experiment,
)
from glyph_data import (
    SPLIT_SEEN,
    SPLIT_UNSEEN,
    DatasetManifest,
    GlyphDataset,
    InfeasibleUniverseError,
    export_corpus,
    generate_dataset,
    load_external_corpus,
    load_universe,
    printed_glyph_bank,
    save_universe,
)
from guidance import GuidanceScales, guided_sample, interpolate_writers

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3
UNIVERSE_FILE = 'universe.json'
LOSS_LOG_FILE = 'loss_log.csv'
LOSS_COLUMNS = ['step', 'loss', 'simple', 'vlb']


# ============================================================================
# PLUMBING
# ============================================================================

def common_options(fn):
    @click.option('--config', 'config_file', type=click.Path(dir_okay=False), default=None,
                  help='YAML run file.')
    @click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE',
                  help='Override one config value (repeatable).')
    @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
                  help='Output directory (default: paths.output_dir).')
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return fn(*args, **kwargs)
    return wrapper


def handle_errors(fn):
    """Map failures to exit codes 2 (config) and 3 (runtime)."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"Configuration error: {e}")
            click.echo(f"Configuration error: {e}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except click.exceptions.Exit:
            raise
        except Exception as e:
            logger.error(f"{type(e).__name__}: {e}", exc_info=True)
            click.echo(f"Error ({type(e).__name__}): {e}", err=True)
            sys.exit(EXIT_RUNTIME_ERROR)
    return wrapper


def prepare_run(config_file, overrides, out_dir, default_dir: str = 'output_dir') -> Tuple[RunConfig, Path]:
    """Resolve config, create the output dir, persist the snapshot, start logging and seed."""
    run_config = CentralConfigManager(config_file, overrides).resolve()
    out = Path(out_dir or getattr(run_config.paths, default_dir))
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out, run_config.runtime.log_level)
    save_resolved_config(run_config, out)
    seed_everything(run_config.train.seed, run_config.runtime.deterministic, run_config.runtime.num_threads)
    logger.info(f"{TOOL_VERSION}: output -> {out}")
    return run_config, out


def load_desk(dataset_dir) -> Tuple[DatasetManifest, GlyphDataset, GlyphDataset]:
    dataset_dir = Path(dataset_dir)
    universe_path = dataset_dir / UNIVERSE_FILE
    if not universe_path.exists():
        raise ConfigError(f"No dataset at {dataset_dir} (missing {UNIVERSE_FILE}); run gen-dataset first")
    manifest = load_universe(universe_path)
    vocab = dict(category_vocab=[str(c) for c in range(manifest.num_categories)],
                 writer_vocab=[str(w) for w in range(manifest.num_writers)])
    train = load_external_corpus(dataset_dir / 'train', size=manifest.image_size, **vocab)
    test = load_external_corpus(dataset_dir / 'test', size=manifest.image_size, **vocab)
    return manifest, train, test


def require_checkpoint(run_config: RunConfig) -> Path:
    """Checked before any compute."""
    if not run_config.paths.checkpoint:
        raise ConfigError("paths.checkpoint is required (use --set paths.checkpoint=PATH)")
    path = Path(run_config.paths.checkpoint)
    if not path.exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    return path


def load_generator(path: Path, device: str):
    store = load_checkpoint(path)
    model = store.build_model().to(device)
    sched = store.build_schedule()
    if sched is None:
        raise ConfigError(f"Checkpoint {path} carries no noise schedule")
    logger.info(f"Generator loaded: {path} (step {store.step}, {count_parameters(model)} parameters)")
    return model, sched


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """(N, 1, H, W) in [-1, 1] -> (N, H, W) uint8."""
    arr = images.detach().cpu().double().numpy()[:, 0]
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_grid(cells: np.ndarray, path: Path) -> Path:
    """cells (rows, cols, H, W) uint8 -> one PNG, row-major."""
    rows, cols, h, w = cells.shape
    grid = cells.transpose(0, 2, 1, 3).reshape(rows * h, cols * w)
    Image.fromarray(grid, mode='L').save(path)
    return path


def cell_noise(seed: int, row: int, col: int, size: int, device: str) -> torch.Tensor:
    """Per-cell x_T; depends only on (seed, row, col)."""
    cell_seed = int(np.random.SeedSequence([seed, row, col]).generate_state(1)[0])
    generator = torch.Generator().manual_seed(cell_seed)
    return torch.randn((1, 1, size, size), generator=generator).to(device)


# ============================================================================
# COMMANDS
# ============================================================================

@click.group()
@click.version_option(TOOL_VERSION, '--version', message='%(version)s')
def cli():
    """Glyph-conditional DDPM toolkit."""


@cli.command('gen-dataset')
@common_options
@handle_errors
def gen_dataset(config_file, overrides, out_dir):
    """Render the universe into <out>/train and <out>/test."""
    run_config, out = prepare_run(config_file, overrides, out_dir, default_dir='dataset_dir')

    try:
        manifest = run_config.universe.build()
    except InfeasibleUniverseError as e:
        raise ConfigError(str(e)) from e
    save_universe(manifest, out / UNIVERSE_FILE)
    train, test = generate_dataset(manifest, progress=True)
    export_corpus(train, out / 'train')
    export_corpus(test, out / 'test')
    logger.info(f"Dataset written to {out}: {len(train) + len(test)} images")
    click.echo(f"{len(train) + len(test)} images -> {out}")


def _train_tensors(manifest: DatasetManifest, train: GlyphDataset, writer_count: int):
    seen_set = train.subset(np.isin(train.category_ids(), manifest.categories(SPLIT_SEEN)))
    bank = printed_glyph_bank(manifest)
    x0 = seen_set.to_tensor()
    glyphs = bank[torch.from_numpy(seen_set.category_ids())]
    writers = torch.from_numpy(seen_set.writer_ids()) if writer_count > 0 else None
    return x0, glyphs, writers


def _flush_losses(rows: List[dict], path: Path) -> None:
    if not rows:
        return
    frame = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    frame.to_csv(path, mode='a', header=not path.exists(), index=False)
    rows.clear()


def _truncate_loss_log(path: Path, step: int) -> None:
    """Drop rows logged after the checkpoint being resumed."""
    if not path.exists():
        return
    frame = pd.read_csv(path)
    frame[frame['step'] <= step].to_csv(path, index=False)


@cli.command('train')
@common_options
@click.option('--resume', 'resume_from', type=click.Path(dir_okay=False), default=None,
              help='Checkpoint to resume from (step counter, optimizer and RNG restored).')
@handle_errors
def train_cmd(config_file, overrides, out_dir, resume_from):
    """Train the denoiser on seen categories only."""
    run_config, out = prepare_run(config_file, overrides, out_dir)
    manifest, train, _ = load_desk(run_config.paths.dataset_dir)

    model_config = run_config.model
    if model_config.writer_count not in (0, manifest.num_writers):
        raise ConfigError(f"model.writer_count must be 0 (WI) or {manifest.num_writers}, "
                          f"got {model_config.writer_count}")
    if model_config.image_size != manifest.image_size:
        raise ConfigError(f"model.image_size {model_config.image_size} != dataset size {manifest.image_size}")

    device = run_config.runtime.device
    ckpt_dir = out / 'checkpoints'
    loss_log = out / LOSS_LOG_FILE
    if resume_from:
        store = load_checkpoint(resume_from, expected_config=model_config)
        trainer = store.build_trainer()
        trainer.model.to(device)
        _truncate_loss_log(loss_log, trainer.step)
        logger.info(f"Resumed from {resume_from} at step {trainer.step}")
    else:
        if loss_log.exists():
            loss_log.unlink()
        trainer = DenoiserTrainer(GlyphUNet(model_config).to(device), run_config.schedule.build(), run_config.train)
    logger.info(f"Model: {count_parameters(trainer.model)} parameters, schedule {trainer.sched}")

    x0, glyphs, writers = _train_tensors(manifest, train, model_config.writer_count)
    logger.info(f"Training on {x0.shape[0]} images of {len(manifest.categories(SPLIT_SEEN))} seen categories")

    cfg = trainer.config
    rows: List[dict] = []
    while trainer.step < run_config.train.steps:
        record = trainer.train_step(trainer.sample_batch(x0, glyphs, writers))
        rows.append(record.as_row())
        if record.step % cfg.log_every == 0:
            logger.info(f"step {record.step}: loss={record.loss:.5f} simple={record.simple:.5f} vlb={record.vlb:.5f}")
            _flush_losses(rows, loss_log)
        if cfg.checkpoint_every > 0 and record.step % cfg.checkpoint_every == 0:
            _flush_losses(rows, loss_log)
            save_checkpoint(ParameterStore.from_trainer(trainer, TOOL_VERSION),
                            ckpt_dir / f'step_{record.step:07d}.npz')
    _flush_losses(rows, loss_log)
    final = save_checkpoint(ParameterStore.from_trainer(trainer, TOOL_VERSION), ckpt_dir / 'final.npz')
    click.echo(f"Trained to step {trainer.step}: {final}")


@cli.command('sample')
@common_options
@handle_errors
def sample_cmd(config_file, overrides, out_dir):
    """Rows = categories, columns = samples; unseen categories are accepted."""
    run_config, out = prepare_run(config_file, overrides, out_dir)
    ckpt = require_checkpoint(run_config)
    manifest = load_universe(Path(run_config.paths.dataset_dir) / UNIVERSE_FILE)
    cfg = run_config.sampling
    device = run_config.runtime.device
    categories = list(cfg.categories) or manifest.categories(SPLIT_UNSEEN)[:4]
    bad = [c for c in categories if not 0 <= c < manifest.num_categories]
    if bad:
        raise ConfigError(f"sampling.categories out of range: {bad}")

    model, sched = load_generator(ckpt, device)
    writer = None if cfg.writer < 0 or cfg.mode == 'wi' else int(cfg.writer)
    if writer is not None and writer >= model.config.writer_count:
        raise ConfigError(f"sampling.writer {writer} >= writer_count {model.config.writer_count}")
    scales = cfg.scales()
    if scales.unguided:
        logger.info("Guidance disabled (gamma = eta = 0): single conditional pass per step")
    else:
        logger.info(f"Guided sampling: gamma={scales.gamma} eta={scales.eta}")

    bank = printed_glyph_bank(manifest).to(device)
    size = manifest.image_size
    cells = np.zeros((len(categories), cfg.count, size, size), dtype=np.uint8)
    (out / 'samples').mkdir(exist_ok=True)
    for r, category in enumerate(categories):
        glyph = bank[category:category + 1]
        for c in range(cfg.count):
            x_T = cell_noise(cfg.seed, r, c, size, device)
            image = guided_sample(model, sched, glyph, writer, scales, cfg.inference_steps, x_T)
            cells[r, c] = to_uint8(image)[0]
            Image.fromarray(cells[r, c], mode='L').save(out / 'samples' / f'r{r:02d}_c{c:02d}_cat{category}.png')
    grid = save_grid(cells, out / 'grid.png')
    click.echo(f"{cells.shape[0] * cells.shape[1]} samples -> {grid}")


@cli.command('interpolate')
@common_options
@handle_errors
def interpolate_cmd(config_file, overrides, out_dir):
    """Rows = categories, columns = lambdas; one noise per row."""
    run_config, out = prepare_run(config_file, overrides, out_dir)
    ckpt = require_checkpoint(run_config)
    manifest = load_universe(Path(run_config.paths.dataset_dir) / UNIVERSE_FILE)
    cfg = run_config.sampling
    device = run_config.runtime.device
    categories = list(cfg.categories) or manifest.categories(SPLIT_UNSEEN)[:3]

    model, sched = load_generator(ckpt, device)
    count = model.config.writer_count
    writer_i, writer_j = int(cfg.writer), int(cfg.writer_j)
    if not (0 <= writer_i < count and 0 <= writer_j < count):
        raise ConfigError(f"sampling.writer / sampling.writer_j must be in [0, {count}), got {writer_i}, {writer_j}")
    lambdas = [float(l) for l in cfg.lambdas]
    if any(not 0.0 <= l <= 1.0 for l in lambdas):
        raise ConfigError(f"sampling.lambdas must lie in [0, 1], got {lambdas}")

    bank = printed_glyph_bank(manifest).to(device)
    size = manifest.image_size
    scales = cfg.scales()
    vectors = [interpolate_writers(model, writer_i, writer_j, l).unsqueeze(0).to(device) for l in lambdas]
    cells = np.zeros((len(categories), len(lambdas), size, size), dtype=np.uint8)
    for r, category in enumerate(categories):
        x_T = cell_noise(cfg.seed, r, 0, size, device)
        for c, vector in enumerate(vectors):
            image = guided_sample(model, sched, bank[category:category + 1], vector, scales,
                                  cfg.inference_steps, x_T)
            cells[r, c] = to_uint8(image)[0]
    grid = save_grid(cells, out / 'interpolation.png')
    click.echo(f"{len(categories)}x{len(lambdas)} interpolation grid -> {grid}")


@cli.command('eval')
@common_options
@click.option('--self-check', is_flag=True, default=False,
              help='Replace the generator with real unseen images and validate the harness.')
@click.option('--sweep', is_flag=True, default=False, help='Also run the guidance-scale sweep.')
@click.option('--compare-wi', 'compare_wi', type=click.Path(dir_okay=False), default=None,
              help='Writer-independent checkpoint; adds a wi / wd / wd_interp comparison at equal pool size.')
@handle_errors
def eval_cmd(config_file, overrides, out_dir, self_check, sweep, compare_wi):
    """Zero-shot recognition experiment; writes report.json and summary.txt."""
    run_config, out = prepare_run(config_file, overrides, out_dir)
    eval_cfg, sampling = run_config.eval, run_config.sampling
    self_check = self_check or eval_cfg.self_check
    ckpt = None if self_check else require_checkpoint(run_config)
    if compare_wi:
        if self_check:
            raise ConfigError("--compare-wi needs a generator checkpoint and cannot run with --self-check")
        if not Path(compare_wi).exists():
            raise ConfigError(f"Checkpoint not found: {compare_wi}")
    manifest, train, test = load_desk(run_config.paths.dataset_dir)
    device = run_config.runtime.device

    if self_check:
        unseen_real = train.subset(np.isin(train.category_ids(), manifest.categories(SPLIT_UNSEEN)))
        source = RealImageSource(unseen_real)
        per_category = manifest.train_samples_per_pair * manifest.num_writers
        make_source = None
    else:
        model, sched = load_generator(ckpt, device)
        if compare_wi and model.config.writer_count < 2:
            raise ConfigError(f"--compare-wi needs a writer-conditional main checkpoint, "
                              f"{ckpt} has writer_count={model.config.writer_count}")
        bank = printed_glyph_bank(manifest).to(device)

        def make_source(scales: GuidanceScales, generator=model, generator_sched=sched, mode=sampling.mode):
            return DiffusionSampleSource(generator, generator_sched, bank, scales, sampling.inference_steps, mode,
                                         sampling.interp_lambda, sampling.batch_size, progress=True)
        source = make_source(sampling.scales())
        per_category = eval_cfg.samples_per_category

    oracle = train_classifier(train.to_tensor(), train.category_ids(), manifest.num_categories,
                              run_config.classifier, progress=True)

    report = {
        'tool_version': TOOL_VERSION,
        'config': run_config.to_dict(),
        'seeds': {'eval': eval_cfg.seed, 'classifier': run_config.classifier.seed,
                  'train': run_config.train.seed, 'universe': manifest.seed},
        'scales': {'gamma': sampling.gamma, 'eta': sampling.eta, 'mode': sampling.mode},
        'self_check': self_check,
        'zero_shot': zero_shot_experiment(source, manifest, train, test, per_category, run_config.classifier,
                                          seed=eval_cfg.seed, oracle=oracle, self_check=self_check,
                                          tolerance=eval_cfg.harness_tolerance, progress=True),
    }
    if sweep and make_source is not None:
        report['sweep'] = guidance_sweep(make_source, eval_cfg.sweep_gammas, sampling.eta, manifest, test, oracle,
                                         eval_cfg.sweep_samples_per_category, seed=eval_cfg.seed)
    if compare_wi:
        wi_model, wi_sched = load_generator(Path(compare_wi), device)
        if wi_model.config.writer_count:
            logger.warning(f"{compare_wi} has writer_count={wi_model.config.writer_count}, sampled with the null writer")
        scales = sampling.scales()
        sources = {
            'wi': make_source(scales, wi_model, wi_sched, 'wi'),
            'wd': make_source(scales, mode='wd'),
            'wd_interp': make_source(scales, mode='wd_interp'),
        }
        report['writer_modes'] = writer_mode_experiment(sources, manifest, train, test, oracle, per_category,
                                                        run_config.classifier, seed=eval_cfg.seed)
    if eval_cfg.augment_samples_per_category > 0:
        aug_source = RealImageSource(train) if make_source is None else source
        report['augmentation'] = augmentation_experiment(aug_source, manifest, train, test,
                                                         eval_cfg.augment_samples_per_category,
                                                         run_config.classifier, seed=eval_cfg.seed, baseline=oracle)
    path = write_report(report, out)
    zero_shot = report['zero_shot']
    click.echo(f"acc_seen={zero_shot['acc_seen']:.4f} acc_unseen={zero_shot['acc_unseen']:.4f} -> {path}")


if __name__ == '__main__':
    cli()
