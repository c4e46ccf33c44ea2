import json
import math

import numpy as np
import pandas as pd
import pytest
import torch

from evalx import (
    CategoryNotCoveredError,
    ClassifierConfig,
    DimensionMismatchError,
    EmptyCategoryError,
    FeatureStats,
    IndefiniteMatrixError,
    NonNormalizedRowError,
    RealImageSource,
    ReferenceClassifier,
    TrainedClassifier,
    accuracy_on,
    correctness_from_predictions,
    correctness_score,
    extract_features,
    feature_stats,
    frechet_distance,
    guidance_sweep,
    inception_style_score,
    predict_proba,
    train_classifier,
    write_report,
    writer_mode_experiment,
    zero_shot_experiment,
)
from glyph_data import SPLIT_UNSEEN, generate_dataset

FAST = ClassifierConfig(channels=4, epochs=3, learning_rate=0.05, batch_size=32, val_fraction=0.0, seed=0)


def stripes(n, horizontal, seed):
    rng = np.random.default_rng(seed)
    base = np.full((16, 16), -1.0)
    if horizontal:
        base[::4, :] = 1.0
        base[1::4, :] = 1.0
    else:
        base[:, ::4] = 1.0
        base[:, 1::4] = 1.0
    images = base[None] + rng.normal(0.0, 0.1, (n, 16, 16))
    return torch.from_numpy(np.clip(images, -1, 1).astype(np.float32)).unsqueeze(1)


@pytest.fixture
def stripe_data():
    images = torch.cat([stripes(48, True, 1), stripes(48, False, 2)])
    labels = np.array([0] * 48 + [1] * 48)
    return images, labels


@pytest.fixture
def desk(small_manifest):
    train, test = generate_dataset(small_manifest)
    return small_manifest, train, test


# ============================================================================
# CLASSIFIER
# ============================================================================

def test_classifier_learns_separable_patterns(stripe_data):
    images, labels = stripe_data
    config = ClassifierConfig(channels=4, epochs=10, batch_size=16, val_fraction=0.0, seed=0)
    trained = train_classifier(images, labels, 2, config)
    assert accuracy_on(trained, images, labels) >= 0.95
    assert list(trained.history.columns) == ['epoch', 'loss', 'train_acc', 'val_acc', 'lr']
    assert len(trained.history) == 10
    assert trained.covered == (0, 1)


def test_conflicting_labels_cap_accuracy(stripe_data):
    images, _ = stripe_data
    doubled = torch.cat([images, images])
    labels = np.array([0] * len(images) + [1] * len(images))
    trained = train_classifier(doubled, labels, 2, FAST)
    # identical inputs get identical predictions
    assert accuracy_on(trained, doubled, labels) == pytest.approx(0.5)


def test_training_is_deterministic(stripe_data):
    images, labels = stripe_data
    a = train_classifier(images, labels, 2, FAST)
    b = train_classifier(images, labels, 2, FAST)
    pd.testing.assert_frame_equal(a.history, b.history)
    np.testing.assert_array_equal(predict_proba(a, images), predict_proba(b, images))


def test_empty_category_rejected(stripe_data):
    images, labels = stripe_data
    with pytest.raises(EmptyCategoryError):
        train_classifier(images, labels, 3, FAST)
    partial = train_classifier(images, labels, 3, FAST, require_all=False)
    assert partial.covered == (0, 1)


def test_probabilities_and_features(stripe_data):
    images, labels = stripe_data
    trained = train_classifier(images, labels, 2, FAST)
    probs = predict_proba(trained, images)
    assert probs.shape == (96, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    features = extract_features(trained, images)
    assert features.shape == (96, trained.feature_dim) and trained.feature_dim == 32


# ============================================================================
# CORRECTNESS SCORE
# ============================================================================

def test_correctness_oracles():
    assert correctness_from_predictions([0, 1, 2, 3], [0, 1, 2, 3]) == 1.0
    assert correctness_from_predictions([0, 1, 2, 0], [0, 1, 2, 3]) == 0.75
    with pytest.raises(DimensionMismatchError):
        correctness_from_predictions([0, 1], [0])


def test_correctness_matches_brute_force():
    rng = np.random.default_rng(4)
    predicted, conditioned = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
    hits = 0
    for p, c in zip(predicted, conditioned):
        if p == c:
            hits += 1
    assert correctness_from_predictions(predicted, conditioned) == pytest.approx(hits / 200)


def test_uncovered_category_rejected():
    oracle = TrainedClassifier(ReferenceClassifier(3, 4), 3, covered=(0, 1))
    with pytest.raises(CategoryNotCoveredError):
        correctness_score(torch.zeros(2, 1, 16, 16), [0, 2], oracle)


# ============================================================================
# FRECHET DISTANCE
# ============================================================================

def test_frechet_identical_sets():
    features = np.random.default_rng(0).normal(size=(200, 4))
    stats = feature_stats(features)
    assert frechet_distance(stats, stats) == pytest.approx(0.0, abs=1e-8)


def test_frechet_one_dimensional_oracles():
    unit = FeatureStats(np.array([0.0]), np.array([[1.0]]), 10)
    shifted = FeatureStats(np.array([1.0]), np.array([[1.0]]), 10)
    wide = FeatureStats(np.array([0.0]), np.array([[4.0]]), 10)
    assert frechet_distance(unit, shifted) == pytest.approx(1.0, abs=1e-9)
    # (1 - 2)^2
    assert frechet_distance(unit, wide) == pytest.approx(1.0, abs=1e-5)


def test_frechet_is_symmetric():
    rng = np.random.default_rng(1)
    a = feature_stats(rng.normal(size=(100, 6)))
    b = feature_stats(rng.normal(0.5, 2.0, size=(80, 6)))
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-6)
    assert frechet_distance(a, b) > 0.0


def test_frechet_errors():
    a = FeatureStats(np.zeros(2), np.eye(2), 5)
    with pytest.raises(DimensionMismatchError):
        frechet_distance(a, FeatureStats(np.zeros(3), np.eye(3), 5))
    with pytest.raises(IndefiniteMatrixError):
        frechet_distance(FeatureStats(np.zeros(2), np.diag([1.0, -1.0]), 5), a)


# ============================================================================
# INCEPTION-STYLE SCORE
# ============================================================================

def test_inception_identical_rows():
    probs = np.tile([0.2, 0.3, 0.5], (10, 1))
    assert inception_style_score(probs) == pytest.approx(1.0)


def test_inception_one_hot_cover():
    assert inception_style_score(np.eye(4)) == pytest.approx(4.0)


def test_inception_duplication_invariant():
    probs = np.random.default_rng(2).dirichlet(np.ones(5), size=30)
    assert inception_style_score(np.vstack([probs, probs])) == pytest.approx(inception_style_score(probs))
    assert 1.0 <= inception_style_score(probs) <= 5.0


def test_inception_rejects_unnormalized_rows():
    with pytest.raises(NonNormalizedRowError):
        inception_style_score(np.array([[0.5, 0.5], [0.7, 0.7]]))
    assert math.isfinite(inception_style_score(np.array([[1.0, 0.0], [0.0, 1.0]])))


# ============================================================================
# EXPERIMENTS
# ============================================================================

def test_real_image_source(desk):
    manifest, train, _ = desk
    images, labels = RealImageSource(train).generate([0, 3], 4, seed=5)
    assert images.shape == (8, 1, 16, 16)
    assert labels.tolist() == [0] * 4 + [3] * 4
    again, _ = RealImageSource(train).generate([0, 3], 4, seed=5)
    assert torch.equal(images, again)


def test_self_check_harness_is_valid(desk):
    manifest, train, test = desk
    per_category = manifest.train_samples_per_pair * manifest.num_writers
    report = zero_shot_experiment(RealImageSource(train), manifest, train, test, per_category,
                                  FAST, seed=1, self_check=True)
    assert report['harness_valid'] is True
    assert report['harness_gap'] <= 0.02
    assert report['num_synthetic'] == per_category * len(manifest.categories(SPLIT_UNSEEN))
    assert report['chance_unseen'] == pytest.approx(1 / 3)
    assert 0.0 <= report['cs'] <= 1.0
    assert report['is'] >= 1.0
    assert report['fid'] >= 0.0


def test_zero_synthetic_samples(desk):
    manifest, train, test = desk
    report = zero_shot_experiment(RealImageSource(train), manifest, train, test, 0, FAST, seed=1)
    assert report['num_synthetic'] == 0
    assert report['cs'] is None and report['fid'] is None
    # unseen classes have no training data, so the full-way classifier never predicts them
    assert report['acc_unseen'] == 0.0
    assert report['acc_unseen'] <= report['chance_unseen'] == pytest.approx(1 / 3)
    assert 'harness_valid' not in report
    assert report['baseline_acc_unseen'] == pytest.approx(report['acc_unseen'])


def test_guidance_sweep_rows(desk):
    manifest, train, test = desk
    oracle = train_classifier(train.to_tensor(), train.category_ids(), manifest.num_categories, FAST)
    requested = []

    def make_source(scales):
        requested.append(scales.gamma)
        return RealImageSource(train)

    frame = guidance_sweep(make_source, [0.0, 2.0], 0.0, manifest, test, oracle, 2, seed=0)
    assert requested == [0.0, 2.0]
    assert list(frame.columns) == ['gamma', 'eta', 'cs', 'fid', 'is']
    assert frame['gamma'].tolist() == [0.0, 2.0]


def test_write_report(tmp_path):
    report = {
        'tool_version': 'test',
        'zero_shot': {'cs': 0.5, 'fid': float('nan'), 'is': 2.0, 'acc_unseen': np.float64(0.25)},
        'sweep': pd.DataFrame([{'gamma': 0.0, 'eta': 0.0, 'cs': 0.4, 'fid': 1.0, 'is': 1.5}]),
    }
    path = write_report(report, tmp_path)
    data = json.loads(path.read_text(encoding='utf-8'))
    assert data['zero_shot']['fid'] is None
    assert data['zero_shot']['acc_unseen'] == 0.25
    assert data['sweep'][0]['gamma'] == 0.0
    summary = (tmp_path / 'summary.txt').read_text(encoding='utf-8')
    assert 'acc_unseen' in summary and '0.2500' in summary


class NoiseSource:
    """Uniform noise images; records every request."""

    def __init__(self):
        self.requests = []

    def generate(self, categories, per_category, seed):
        self.requests.append((list(categories), per_category, seed))
        labels = np.repeat(np.asarray(list(categories), dtype=np.int64), per_category)
        generator = torch.Generator().manual_seed(seed)
        return torch.rand((len(labels), 1, 16, 16), generator=generator) * 2 - 1, labels


def test_writer_mode_rows_share_pool(desk):
    manifest, train, test = desk
    oracle = train_classifier(train.to_tensor(), train.category_ids(), manifest.num_categories, FAST)
    noise = NoiseSource()
    frame = writer_mode_experiment({'wi': noise, 'wd_interp': RealImageSource(train)}, manifest, train, test,
                                   oracle, 3, FAST, seed=9)
    unseen = manifest.categories(SPLIT_UNSEEN)
    assert noise.requests == [(unseen, 3, 9)]
    assert list(frame.columns) == ['setting', 'num_synthetic', 'cs', 'fid', 'is', 'acc_unseen']
    assert frame['setting'].tolist() == ['wi', 'wd_interp']
    assert frame['num_synthetic'].tolist() == [3 * len(unseen)] * 2
    real, fake = frame.set_index('setting').loc['wd_interp'], frame.set_index('setting').loc['wi']
    assert real['fid'] < fake['fid']
    assert 0.0 <= real['acc_unseen'] <= 1.0


def test_writer_mode_without_accuracy(desk):
    manifest, train, test = desk
    oracle = train_classifier(train.to_tensor(), train.category_ids(), manifest.num_categories, FAST)
    frame = writer_mode_experiment({'wd': RealImageSource(train)}, manifest, train, test, oracle, 2)
    assert frame['acc_unseen'].isna().all()
    with pytest.raises(ValueError):
        writer_mode_experiment({'wd': RealImageSource(train)}, manifest, train, test, oracle, 0)


def test_write_report_lists_writer_modes(tmp_path):
    modes = pd.DataFrame([{'setting': 'wi', 'num_synthetic': 6, 'cs': 0.5, 'fid': 2.0, 'is': 1.2,
                           'acc_unseen': None}])
    write_report({'zero_shot': {'cs': 0.5}, 'writer_modes': modes}, tmp_path)
    data = json.loads((tmp_path / 'report.json').read_text(encoding='utf-8'))
    assert data['writer_modes'][0]['setting'] == 'wi'
    assert 'wd_interp' not in (tmp_path / 'summary.txt').read_text(encoding='utf-8')
    assert 'setting' in (tmp_path / 'summary.txt').read_text(encoding='utf-8')
