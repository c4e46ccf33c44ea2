import json
import logging
from pathlib import Path

import pandas as pd
import pytest
from click.testing import CliRunner

from glyph_data import SPLIT_SEEN, SPLIT_UNSEEN, check_zero_shot_premise, load_universe
from main import cli

pytestmark = pytest.mark.slow

DESK_RUN = Path(__file__).resolve().parent.parent / 'runs' / 'desk.yaml'


def invoke(*args):
    result = CliRunner().invoke(cli, list(args))
    for handler in list(logging.getLogger().handlers):
        if getattr(handler, '_gcddpm', False):
            logging.getLogger().removeHandler(handler)
            handler.close()
    return result


@pytest.fixture(scope='module')
def default_desk(tmp_path_factory):
    out = tmp_path_factory.mktemp('default_desk')
    result = invoke('gen-dataset', '--out', str(out))
    assert result.exit_code == 0, result.output
    return out


def train_desk(desk, out, *extra):
    result = invoke('train', '--config', str(DESK_RUN), '--out', str(out),
                    '--set', f'paths.dataset_dir={desk}', *extra)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope='module')
def desk_wd(default_desk, tmp_path_factory):
    return train_desk(default_desk, tmp_path_factory.mktemp('desk_wd'))


@pytest.fixture(scope='module')
def desk_wi(default_desk, tmp_path_factory):
    return train_desk(default_desk, tmp_path_factory.mktemp('desk_wi'), '--set', 'model.writer_count=0')


@pytest.fixture(scope='module')
def desk_report(default_desk, desk_wd, desk_wi, tmp_path_factory):
    out = tmp_path_factory.mktemp('desk_eval')
    result = invoke('eval', '--config', str(DESK_RUN), '--out', str(out), '--sweep',
                    '--set', f'paths.dataset_dir={default_desk}',
                    '--set', f'paths.checkpoint={desk_wd / "checkpoints" / "final.npz"}',
                    '--compare-wi', str(desk_wi / 'checkpoints' / 'final.npz'))
    assert result.exit_code == 0, result.output
    return json.loads((out / 'report.json').read_text(encoding='utf-8'))


def test_default_desk_size(default_desk):
    # 40 categories x 8 writers x 64 samples
    assert '20480 images' in (default_desk / 'logs' / 'gcddpm.log').read_text(encoding='utf-8')
    train = (default_desk / 'train' / 'manifest.tsv').read_text(encoding='utf-8').splitlines()
    test = (default_desk / 'test' / 'manifest.tsv').read_text(encoding='utf-8').splitlines()
    assert len(train) == 40 * 8 * 48
    assert len(test) == 40 * 8 * 16


def test_default_universe_split(default_desk):
    manifest = load_universe(default_desk / 'universe.json')
    assert len(manifest.categories(SPLIT_SEEN)) == 24
    assert len(manifest.categories(SPLIT_UNSEEN)) == 16
    assert check_zero_shot_premise(manifest)


def test_default_self_check_is_valid(default_desk, tmp_path):
    result = invoke('eval', '--self-check', '--out', str(tmp_path), '--set', f'paths.dataset_dir={default_desk}',
                    '--set', 'classifier.epochs=5')
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / 'report.json').read_text(encoding='utf-8'))
    zero_shot = report['zero_shot']
    assert zero_shot['harness_valid'] is True
    assert zero_shot['ref_acc_unseen'] > zero_shot['chance_unseen']


def test_desk_training_loss_decreases(desk_wd):
    loss = pd.read_csv(desk_wd / 'loss_log.csv')['loss']
    assert len(loss) == 6000
    assert loss.tail(100).mean() < loss.head(100).mean()


def test_seen_samples_are_recognized(desk_report):
    sweep = pd.DataFrame(desk_report['sweep']).set_index('gamma')
    assert sweep.loc[0.0, 'cs'] >= 0.80


def test_synthetic_unseen_samples_teach_the_classifier(desk_report):
    zero_shot = desk_report['zero_shot']
    assert zero_shot['acc_unseen'] > 5 * zero_shot['chance_unseen']
    assert zero_shot['acc_unseen'] >= zero_shot['baseline_acc_unseen'] + 0.20


def test_content_guidance_trades_diversity_for_correctness(desk_report):
    sweep = pd.DataFrame(desk_report['sweep']).set_index('gamma')
    assert sweep.loc[2.0, 'cs'] >= sweep.loc[0.0, 'cs']
    assert sweep.loc[2.0, 'fid'] >= sweep.loc[0.0, 'fid']


def test_interpolated_writers_beat_writer_independent_fid(desk_report):
    modes = pd.DataFrame(desk_report['writer_modes']).set_index('setting')
    assert modes.loc['wd_interp', 'num_synthetic'] == modes.loc['wi', 'num_synthetic']
    assert modes.loc['wd_interp', 'fid'] <= modes.loc['wi', 'fid']
