"""
Evaluation stack for synthetic glyphs.

Features:
- Small residual reference classifier (recognizer + feature extractor)
- Correctness score (oracle prediction == conditioned category)
- Frechet distance on penultimate-layer features (eigh-based matrix sqrt)
- Inception-style score on task-classifier probabilities
- Zero-shot recognition experiment, guidance sweep, augmentation experiment
- Writer-mode comparison (wi / wd / wd_interp pools at equal size)
- report.json + summary.txt writer

Usage:
    from evalx import train_classifier, ClassifierConfig

    oracle = train_classifier(images, labels, num_classes=40, config=ClassifierConfig())
    probs = predict_proba(oracle, images)
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F
from prettytable import PrettyTable
from scipy.special import rel_entr
from tqdm import tqdm

from diffusion_core import NoiseSchedule
from glyph_data import SPLIT_SEEN, SPLIT_UNSEEN, DatasetManifest, GlyphDataset
from guidance import GuidanceScales, guided_sample, writer_conditions

logger = logging.getLogger(__name__)

COVARIANCE_RIDGE = 1e-6
NEGATIVE_EIGEN_TOLERANCE = 1e-8
ROW_SUM_TOLERANCE = 1e-5
REPORT_FILE = 'report.json'
SUMMARY_FILE = 'summary.txt'
WRITER_MODE_COLUMNS = ['setting', 'num_synthetic', 'cs', 'fid', 'is', 'acc_unseen']


class EmptyCategoryError(ValueError):
    pass


class CategoryNotCoveredError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class IndefiniteMatrixError(ValueError):
    pass


class NonNormalizedRowError(ValueError):
    pass


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class ClassifierConfig:
    channels: int = 16
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    step_size: int = 10
    gamma: float = 0.1
    batch_size: int = 128
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"classifier.val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.epochs < 0 or self.batch_size < 1 or self.channels < 1:
            raise ValueError("classifier.epochs >= 0, batch_size >= 1 and channels >= 1 required")


@dataclass
class EvalConfig:
    samples_per_category: int = 64
    self_check: bool = False
    harness_tolerance: float = 0.02
    sweep_gammas: Tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0)
    sweep_samples_per_category: int = 16
    augment_samples_per_category: int = 0
    seed: int = 2024


# ============================================================================
# REFERENCE CLASSIFIER
# ============================================================================

def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class ReferenceClassifier(nn.Module):
    """Four residual stages (widths c, 2c, 4c, 8c), global pool, linear head."""

    def __init__(self, num_classes: int, channels: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.stem = nn.Sequential(nn.Conv2d(1, channels, 3, padding=1, bias=False), _norm(channels), nn.ReLU())
        widths = [channels * m for m in (1, 2, 4, 8)]
        stages, in_ch = [], channels
        for i, width in enumerate(widths):
            stages.append(BasicBlock(in_ch, width, stride=1 if i == 0 else 2))
            in_ch = width
        self.stages = nn.Sequential(*stages)
        self.feature_dim = in_ch
        self.head = nn.Linear(in_ch, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self.stages(self.stem(x)), 1).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class TrainedClassifier:
    model: ReferenceClassifier
    num_classes: int
    covered: Tuple[int, ...]
    history: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def feature_dim(self) -> int:
        return self.model.feature_dim


def _accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch_size: int) -> float:
    if len(labels) == 0:
        return float('nan')
    preds = _batched(model, images, batch_size, lambda m, x: m(x).argmax(dim=1))
    return float((preds == labels).float().mean())


def _batched(model: nn.Module, images: torch.Tensor, batch_size: int, fn) -> torch.Tensor:
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(fn(model, images[start:start + batch_size]))
    return torch.cat(outs) if outs else torch.zeros(0)


def train_classifier(
    images: torch.Tensor,
    labels: Union[torch.Tensor, np.ndarray],
    num_classes: int,
    config: ClassifierConfig,
    require_all: bool = True,
    progress: bool = False,
) -> TrainedClassifier:
    """
    SGD + momentum with a step-decay schedule; no augmentation.

    Args:
        images: (N, 1, H, W) in [-1, 1]
        labels: (N,) category ids in [0, num_classes)
        require_all: every class must have samples (False for zero-shot
            baselines where some classes are deliberately empty)

    Raises:
        EmptyCategoryError: fewer than 2 classes, or an empty class when require_all
    """
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    counts = torch.bincount(labels, minlength=num_classes) if len(labels) else torch.zeros(num_classes, dtype=torch.long)
    present = [int(c) for c in torch.nonzero(counts).flatten()]
    if num_classes < 2 or len(present) < 2:
        raise EmptyCategoryError(f"Classifier needs >= 2 populated categories, got {len(present)}")
    if require_all and len(present) < num_classes:
        missing = sorted(set(range(num_classes)) - set(present))
        raise EmptyCategoryError(f"Empty categories: {missing[:10]}")

    rng = np.random.default_rng(config.seed)
    order = torch.from_numpy(rng.permutation(len(labels)))
    n_val = int(round(config.val_fraction * len(labels)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_train, y_train = images[train_idx], labels[train_idx]
    x_val, y_val = images[val_idx], labels[val_idx]

    torch.manual_seed(config.seed)
    model = ReferenceClassifier(num_classes, config.channels)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                                momentum=config.momentum, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=max(config.step_size, 1), gamma=config.gamma)
    generator = torch.Generator().manual_seed(config.seed)

    rows = []
    for epoch in tqdm(range(1, config.epochs + 1), desc='classifier', disable=not progress):
        model.train()
        perm = torch.randperm(len(y_train), generator=generator)
        total, seen = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss = F.cross_entropy(model(x_train[idx]), y_train[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        lr = optimizer.param_groups[0]['lr']
        scheduler.step()
        rows.append({
            'epoch': epoch,
            'loss': total / max(seen, 1),
            'train_acc': _accuracy(model, x_train, y_train, config.batch_size),
            'val_acc': _accuracy(model, x_val, y_val, config.batch_size),
            'lr': lr,
        })
        logger.debug(f"classifier epoch {epoch}: loss={rows[-1]['loss']:.4f} train_acc={rows[-1]['train_acc']:.4f}")

    model.eval()
    history = pd.DataFrame(rows, columns=['epoch', 'loss', 'train_acc', 'val_acc', 'lr'])
    if rows:
        logger.info(f"Classifier trained: {num_classes} classes, train_acc={rows[-1]['train_acc']:.4f}, "
                    f"val_acc={rows[-1]['val_acc']:.4f}")
    return TrainedClassifier(model, num_classes, tuple(present), history)


def predict_proba(classifier: TrainedClassifier, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Softmax rows (N, K), float64."""
    out = _batched(classifier.model, images, batch_size, lambda m, x: F.softmax(m(x).double(), dim=1))
    return out.numpy().reshape(-1, classifier.num_classes)


def extract_features(classifier: TrainedClassifier, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer features (N, D), float64."""
    out = _batched(classifier.model, images, batch_size, lambda m, x: m.features(x).double())
    return out.numpy().reshape(-1, classifier.feature_dim)


def accuracy_on(classifier: TrainedClassifier, images: torch.Tensor, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float('nan')
    return float((predict_proba(classifier, images).argmax(axis=1) == np.asarray(labels)).mean())


# ============================================================================
# METRICS
# ============================================================================

def correctness_from_predictions(predicted: Sequence[int], conditioned: Sequence[int]) -> float:
    predicted, conditioned = np.asarray(predicted), np.asarray(conditioned)
    if predicted.shape != conditioned.shape:
        raise DimensionMismatchError(f"{predicted.shape} predictions vs {conditioned.shape} conditions")
    if predicted.size == 0:
        raise ValueError("Correctness score of an empty sample set")
    return float(np.mean(predicted == conditioned))


def correctness_score(images: torch.Tensor, conditioned: Sequence[int], oracle: TrainedClassifier) -> float:
    """
    Fraction of samples the oracle assigns to their conditioning category.

    Raises:
        CategoryNotCoveredError: a conditioned category had no oracle training data
    """
    conditioned = np.asarray(conditioned, dtype=np.int64)
    uncovered = sorted(set(conditioned.tolist()) - set(oracle.covered))
    if uncovered:
        raise CategoryNotCoveredError(f"Oracle was not trained on categories {uncovered[:10]}")
    predicted = predict_proba(oracle, images).argmax(axis=1)
    return correctness_from_predictions(predicted, conditioned)


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def feature_stats(features: np.ndarray) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"Need an (N >= 2, D) feature matrix, got shape {features.shape}")
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    return FeatureStats(features.mean(axis=0), (cov + cov.T) / 2.0, int(features.shape[0]))


def _symmetric_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigh; tiny negative eigenvalues clamp to 0."""
    eigvals, eigvecs = scipy.linalg.eigh((mat + mat.T) / 2.0)
    if eigvals.min() < -NEGATIVE_EIGEN_TOLERANCE:
        raise IndefiniteMatrixError(f"Matrix has eigenvalue {eigvals.min():.3e} < {-NEGATIVE_EIGEN_TOLERANCE}")
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats, ridge: float = COVARIANCE_RIDGE) -> float:
    """
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), S = Sigma + ridge*I.

    Tr (S_a S_b)^(1/2) is evaluated as Tr (A S_b A)^(1/2) with A = S_a^(1/2),
    keeping every root symmetric.
    """
    if a.dim != b.dim:
        raise DimensionMismatchError(f"Feature dimensions differ: {a.dim} vs {b.dim}")
    eye = np.eye(a.dim)
    sa, sb = a.cov + ridge * eye, b.cov + ridge * eye
    root_a = _symmetric_sqrt(sa)
    trace_cross = np.trace(_symmetric_sqrt(root_a @ sb @ root_a))
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * trace_cross)
    return max(value, 0.0)


def inception_style_score(probs: np.ndarray) -> float:
    """exp(mean_x KL(p(y|x) || p(y))) with p(y) the row mean."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError(f"Need a non-empty (N, K) probability matrix, got shape {probs.shape}")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero((np.abs(sums - 1.0) > ROW_SUM_TOLERANCE) | (probs < 0).any(axis=1))
    if bad.size:
        raise NonNormalizedRowError(f"Row {int(bad[0])} is not a probability vector (sum={sums[bad[0]]:.6f})")
    marginal = probs.mean(axis=0, keepdims=True)
    kl = rel_entr(probs, marginal).sum(axis=1)
    return max(1.0, float(np.exp(kl.mean())))


def sample_metrics(images: torch.Tensor, labels: np.ndarray, oracle: TrainedClassifier,
                   reference: Optional[torch.Tensor]) -> Dict[str, Optional[float]]:
    """CS / FID / IS of one synthetic pool against a real reference set."""
    probs = predict_proba(oracle, images)
    metrics = {
        'cs': correctness_score(images, labels, oracle),
        'is': inception_style_score(probs),
        'fid': None,
    }
    if reference is not None and len(reference) >= 2 and len(images) >= 2:
        metrics['fid'] = frechet_distance(feature_stats(extract_features(oracle, images)),
                                          feature_stats(extract_features(oracle, reference)))
    return metrics


# ============================================================================
# SAMPLE SOURCES
# ============================================================================

class SampleSource(Protocol):
    def generate(self, categories: Sequence[int], per_category: int, seed: int) -> Tuple[torch.Tensor, np.ndarray]:
        """Returns (images (N, 1, H, W) in [-1, 1], category labels (N,))."""


class DiffusionSampleSource:
    """Guided DDIM from a trained GlyphUNet, conditioned on printed glyphs."""

    def __init__(self, model, sched: NoiseSchedule, glyph_bank: torch.Tensor, scales: GuidanceScales,
                 inference_steps: int = 50, mode: str = 'wd', interp_lambda: float = 0.5,
                 batch_size: int = 64, progress: bool = False):
        self.model = model
        self.sched = sched
        self.glyph_bank = glyph_bank
        self.scales = scales
        self.inference_steps = inference_steps
        self.mode = mode
        self.interp_lambda = interp_lambda
        self.batch_size = batch_size
        self.progress = progress
        self.last_tags: List[str] = []

    def generate(self, categories, per_category, seed):
        labels = np.repeat(np.asarray(list(categories), dtype=np.int64), per_category)
        size = self.glyph_bank.shape[-1]
        if labels.size == 0:
            return torch.zeros(0, 1, size, size), labels
        generator = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        self.model.eval()
        images, tags = [], []
        starts = range(0, len(labels), self.batch_size)
        for start in tqdm(starts, desc='sample', disable=not self.progress):
            batch = labels[start:start + self.batch_size]
            x_T = torch.randn((len(batch), 1, size, size), generator=generator)
            writer, batch_tags = writer_conditions(self.model, self.mode, len(batch), rng, self.interp_lambda)
            glyph = self.glyph_bank[torch.from_numpy(batch)]
            images.append(guided_sample(self.model, self.sched, glyph, writer, self.scales,
                                        self.inference_steps, x_T))
            tags.extend(batch_tags)
        self.last_tags = tags
        return torch.cat(images), labels


class RealImageSource:
    """Oracle generator returning real images (harness self-check)."""

    def __init__(self, dataset: GlyphDataset):
        self.dataset = dataset
        self._ids = dataset.category_ids()
        self._tensor = dataset.to_tensor()

    def generate(self, categories, per_category, seed):
        rng = np.random.default_rng(seed)
        picks = []
        for c in categories:
            pool = np.flatnonzero(self._ids == c)
            if per_category > 0 and pool.size == 0:
                raise EmptyCategoryError(f"No real images for category {c}")
            take = min(per_category, pool.size)
            picks.append(np.sort(rng.choice(pool, size=take, replace=False)))
        idx = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
        return self._tensor[torch.from_numpy(idx)], self._ids[idx]


# ============================================================================
# EXPERIMENTS
# ============================================================================

def _split_ids(manifest: DatasetManifest) -> Tuple[List[int], List[int]]:
    return manifest.categories(SPLIT_SEEN), manifest.categories(SPLIT_UNSEEN)


def _mask(ids: np.ndarray, categories: Sequence[int]) -> np.ndarray:
    return np.isin(ids, np.asarray(list(categories), dtype=np.int64))


def _train_seen_plus_synthetic(
    synthetic_x: torch.Tensor,
    synthetic_y: np.ndarray,
    seen: Sequence[int],
    train_x: torch.Tensor,
    train_ids: np.ndarray,
    num_classes: int,
    classifier_config: ClassifierConfig,
    progress: bool = False,
) -> TrainedClassifier:
    seen_mask = _mask(train_ids, seen)
    mixed_x = torch.cat([train_x[torch.from_numpy(seen_mask)], synthetic_x.to(train_x.dtype)])
    mixed_y = np.concatenate([train_ids[seen_mask], synthetic_y])
    # category-major order, same as the exported corpora
    order = torch.from_numpy(np.argsort(mixed_y, kind='stable'))
    mixed_x, mixed_y = mixed_x[order], mixed_y[order.numpy()]
    return train_classifier(mixed_x, mixed_y, num_classes, classifier_config, require_all=False, progress=progress)


def zero_shot_experiment(
    source: SampleSource,
    manifest: DatasetManifest,
    train_set: GlyphDataset,
    test_set: GlyphDataset,
    samples_per_category: int,
    classifier_config: ClassifierConfig,
    seed: int = 0,
    oracle: Optional[TrainedClassifier] = None,
    self_check: bool = False,
    tolerance: float = 0.02,
    progress: bool = False,
) -> Dict[str, Any]:
    """
    Train on real seen + synthetic unseen, test on real held-out images.

    The oracle (trained on real data of every category) scores CS, provides
    FID/IS features and is the reference for the harness self-check. A
    baseline trained on real seen data alone gives baseline_acc_unseen.
    """
    seen, unseen = _split_ids(manifest)
    num_classes = manifest.num_categories
    train_ids, test_ids = train_set.category_ids(), test_set.category_ids()
    train_x, test_x = train_set.to_tensor(), test_set.to_tensor()

    if oracle is None:
        logger.info("Training oracle classifier on real data of all categories")
        oracle = train_classifier(train_x, train_ids, num_classes, classifier_config, progress=progress)

    synthetic_x, synthetic_y = source.generate(unseen, samples_per_category, seed)
    logger.info(f"Synthetic pool: {len(synthetic_y)} images for {len(unseen)} unseen categories")

    fresh = _train_seen_plus_synthetic(synthetic_x, synthetic_y, seen, train_x, train_ids, num_classes,
                                       classifier_config, progress=progress)
    seen_mask = _mask(train_ids, seen)

    test_seen, test_unseen = _mask(test_ids, seen), _mask(test_ids, unseen)
    baseline_unseen = None
    if len(seen) >= 2:
        # same recipe without synthetic samples
        seen_t = torch.from_numpy(seen_mask)
        baseline = train_classifier(train_x[seen_t], train_ids[seen_mask], num_classes, classifier_config,
                                    require_all=False, progress=progress)
        baseline_unseen = accuracy_on(baseline, test_x[torch.from_numpy(test_unseen)], test_ids[test_unseen])

    report: Dict[str, Any] = {
        'acc_seen': accuracy_on(fresh, test_x[torch.from_numpy(test_seen)], test_ids[test_seen]),
        'acc_unseen': accuracy_on(fresh, test_x[torch.from_numpy(test_unseen)], test_ids[test_unseen]),
        'ref_acc_seen': accuracy_on(oracle, test_x[torch.from_numpy(test_seen)], test_ids[test_seen]),
        'ref_acc_unseen': accuracy_on(oracle, test_x[torch.from_numpy(test_unseen)], test_ids[test_unseen]),
        'baseline_acc_unseen': baseline_unseen,
        'chance_unseen': 1.0 / len(unseen) if unseen else None,
        'samples_per_category': samples_per_category,
        'num_synthetic': int(len(synthetic_y)),
        'num_seen': len(seen),
        'num_unseen': len(unseen),
        'seed': seed,
        'classifier_seed': classifier_config.seed,
        'cs': None, 'fid': None, 'is': None,
    }
    if len(synthetic_y):
        reference = test_x[torch.from_numpy(test_unseen)]
        report.update(sample_metrics(synthetic_x, synthetic_y, oracle, reference))
    report['fid_note'] = (f"FID from {len(synthetic_y)} synthetic vs {int(test_unseen.sum())} real features "
                          f"(dim {oracle.feature_dim}); small pools inflate variance")
    if self_check:
        gap = abs(report['acc_unseen'] - report['ref_acc_unseen'])
        report['harness_gap'] = gap
        report['harness_valid'] = bool(gap <= tolerance)
        logger.info(f"Harness self-check: gap={gap:.4f} valid={report['harness_valid']}")
    return report


def guidance_sweep(
    make_source: Callable[[GuidanceScales], SampleSource],
    gammas: Sequence[float],
    eta: float,
    manifest: DatasetManifest,
    test_set: GlyphDataset,
    oracle: TrainedClassifier,
    samples_per_category: int,
    seed: int = 0,
) -> pd.DataFrame:
    """CS / FID / IS on seen categories for each content guidance scale."""
    seen, _ = _split_ids(manifest)
    test_ids = test_set.category_ids()
    reference = test_set.to_tensor()[torch.from_numpy(_mask(test_ids, seen))]
    rows = []
    for gamma in gammas:
        images, labels = make_source(GuidanceScales(gamma, eta)).generate(seen, samples_per_category, seed)
        rows.append({'gamma': float(gamma), 'eta': float(eta), **sample_metrics(images, labels, oracle, reference)})
        logger.info(f"Sweep gamma={gamma}: {rows[-1]}")
    return pd.DataFrame(rows, columns=['gamma', 'eta', 'cs', 'fid', 'is'])


def writer_mode_experiment(
    sources: Dict[str, SampleSource],
    manifest: DatasetManifest,
    train_set: GlyphDataset,
    test_set: GlyphDataset,
    oracle: TrainedClassifier,
    samples_per_category: int,
    classifier_config: Optional[ClassifierConfig] = None,
    seed: int = 0,
) -> pd.DataFrame:
    """
    One row per synthesis setting (e.g. wi, wd, wd_interp) on the unseen categories.

    Every setting draws the same pool size with the same seed and is scored
    by the same oracle against the same real test images. With a
    classifier_config each row also gets acc_unseen from a classifier
    trained on real seen + that setting's synthetic unseen samples.

    Raises:
        ValueError: samples_per_category < 1 or no unseen categories
    """
    if samples_per_category < 1:
        raise ValueError(f"Writer-mode comparison needs samples_per_category >= 1, got {samples_per_category}")
    seen, unseen = _split_ids(manifest)
    if not unseen:
        raise ValueError("Writer-mode comparison needs unseen categories")
    test_ids = test_set.category_ids()
    test_x = test_set.to_tensor()
    unseen_t = torch.from_numpy(_mask(test_ids, unseen))
    reference = test_x[unseen_t]

    rows = []
    for setting, source in sources.items():
        images, labels = source.generate(unseen, samples_per_category, seed)
        row = {'setting': setting, 'num_synthetic': int(len(labels)), 'acc_unseen': None,
               **sample_metrics(images, labels, oracle, reference)}
        if classifier_config is not None:
            fresh = _train_seen_plus_synthetic(images, labels, seen, train_set.to_tensor(),
                                               train_set.category_ids(), manifest.num_categories, classifier_config)
            row['acc_unseen'] = accuracy_on(fresh, reference, test_ids[unseen_t.numpy()])
        rows.append(row)
        logger.info(f"Writer mode {setting}: fid={row['fid']} cs={row['cs']:.4f} is={row['is']:.4f}")
    return pd.DataFrame(rows, columns=WRITER_MODE_COLUMNS)


def augmentation_experiment(
    source: SampleSource,
    manifest: DatasetManifest,
    train_set: GlyphDataset,
    test_set: GlyphDataset,
    samples_per_category: int,
    classifier_config: ClassifierConfig,
    seed: int = 0,
    baseline: Optional[TrainedClassifier] = None,
) -> Dict[str, Any]:
    """Real data of all categories with and without added synthetic samples."""
    categories = manifest.categories()
    num_classes = manifest.num_categories
    train_ids, test_ids = train_set.category_ids(), test_set.category_ids()
    train_x, test_x = train_set.to_tensor(), test_set.to_tensor()

    if baseline is None:
        baseline = train_classifier(train_x, train_ids, num_classes, classifier_config)
    synthetic_x, synthetic_y = source.generate(categories, samples_per_category, seed)
    augmented = train_classifier(torch.cat([train_x, synthetic_x.to(train_x.dtype)]),
                                 np.concatenate([train_ids, synthetic_y]), num_classes, classifier_config)
    return {
        'acc_real_only': accuracy_on(baseline, test_x, test_ids),
        'acc_augmented': accuracy_on(augmented, test_x, test_ids),
        'samples_per_category': samples_per_category,
        'seed': seed,
    }


# ============================================================================
# REPORT
# ============================================================================

def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, pd.DataFrame):
        return [_plain(r) for r in value.to_dict(orient='records')]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _fmt(value) -> str:
    if value is None:
        return '-'
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_report(report: Dict[str, Any], out_dir: Union[str, Path]) -> Path:
    """report.json (everything) + summary.txt (metric table)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / REPORT_FILE
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_plain(report), f, indent=2, sort_keys=True)
        f.write('\n')

    table = PrettyTable()
    table.field_names = ['metric', 'value']
    table.align['metric'] = 'l'
    table.align['value'] = 'r'
    metrics = report.get('zero_shot', report)
    for key in ('cs', 'fid', 'is', 'acc_seen', 'acc_unseen', 'baseline_acc_unseen', 'ref_acc_seen',
                'ref_acc_unseen', 'harness_valid', 'seed'):
        if key in metrics:
            table.add_row([key, _fmt(metrics[key])])
    lines = [table.get_string()]

    sweep = report.get('sweep')
    if sweep is not None and len(sweep):
        sweep_table = PrettyTable()
        sweep_table.field_names = ['gamma', 'eta', 'cs', 'fid', 'is']
        for row in _plain(sweep):
            sweep_table.add_row([_fmt(row.get(k)) for k in sweep_table.field_names])
        lines.append(sweep_table.get_string())

    modes = report.get('writer_modes')
    if modes is not None and len(modes):
        modes_table = PrettyTable()
        modes_table.field_names = WRITER_MODE_COLUMNS
        for row in _plain(modes):
            modes_table.add_row([_fmt(row.get(k)) for k in WRITER_MODE_COLUMNS])
        lines.append(modes_table.get_string())

    (out_dir / SUMMARY_FILE).write_text('\n\n'.join(lines) + '\n', encoding='utf-8')
    logger.info(f"Report written: {path}")
    return path
