import logging
from pathlib import Path

import pytest
import yaml

from central_config import (
    TOOL_VERSION,
    CentralConfigManager,
    ConfigError,
    load_resolved_config,
    save_resolved_config,
    setup_logging,
)


def manager(config_file=None, overrides=()):
    return CentralConfigManager(config_file, overrides, use_env=False)


def test_defaults():
    run_config = manager().resolve()
    assert run_config.schedule.num_steps == 1000
    assert run_config.model.attention_resolutions == (16, 8)
    assert run_config.universe.num_categories == 40
    assert run_config.train.lambda_vlb == pytest.approx(0.001)


def test_layers_later_wins(tmp_path):
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump({'train': {'steps': 100, 'batch_size': 16}}), encoding='utf-8')
    run_config = manager(path, ['train.steps=7']).resolve()
    assert run_config.train.steps == 7
    assert run_config.train.batch_size == 16


def test_env_layer(monkeypatch):
    monkeypatch.setenv('GCDDPM_SAMPLING__GAMMA', '1.5')
    run_config = CentralConfigManager(overrides=['sampling.eta=2']).resolve()
    assert run_config.sampling.gamma == 1.5
    assert run_config.sampling.eta == 2.0


def test_log_level_env_variable(monkeypatch):
    monkeypatch.delenv('GCDDPM_RUNTIME__LOG_LEVEL', raising=False)
    monkeypatch.setenv('GCDDPM_LOG_LEVEL', 'DEBUG')
    assert CentralConfigManager().resolve().runtime.log_level == 'DEBUG'
    # command-line overrides still come last
    run_config = CentralConfigManager(overrides=['runtime.log_level=WARNING']).resolve()
    assert run_config.runtime.log_level == 'WARNING'


def test_synthesis_mode_lives_in_sampling():
    run_config = manager(overrides=['sampling.mode=wd_interp']).resolve()
    assert run_config.sampling.mode == 'wd_interp'
    assert not hasattr(run_config.eval, 'mode')


def test_list_override_is_coerced():
    run_config = manager(overrides=['model.channel_multipliers=[1, 2, 2]']).resolve()
    assert run_config.model.channel_multipliers == (1, 2, 2)


@pytest.mark.parametrize('override,name', [
    ('model.bogus=1', 'model.bogus'),
    ('nosection.key=1', 'nosection'),
    ('train.steps=many', 'train.steps'),
    ('eval.mode=wi', 'eval.mode'),
])
def test_bad_keys_are_named(override, name):
    with pytest.raises(ConfigError, match=name):
        manager(overrides=[override]).resolve()


def test_invalid_section_value():
    with pytest.raises(ConfigError):
        manager(overrides=['sampling.gamma=-1']).resolve()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        manager(tmp_path / 'absent.yaml').resolve()


def test_cache_and_refresh(tmp_path):
    path = tmp_path / 'run.yaml'
    path.write_text('train:\n  steps: 5\n', encoding='utf-8')
    m = manager(path)
    assert m.get_setting('train.steps') == 5
    path.write_text('train:\n  steps: 9\n', encoding='utf-8')
    assert m.get_setting('train.steps') == 5
    m.refresh()
    assert m.get_setting('train.steps') == 9
    assert m.get_setting('nosection.key', 'fallback') == 'fallback'


def test_resolved_snapshot_round_trip(tmp_path):
    run_config = manager(overrides=['train.steps=12', 'sampling.categories=[3, 4]']).resolve()
    save_resolved_config(run_config, tmp_path)
    assert (tmp_path / 'VERSION').read_text(encoding='utf-8').strip() == TOOL_VERSION
    assert load_resolved_config(tmp_path) == run_config


def test_setup_logging_writes_file(tmp_path):
    log_file = setup_logging(tmp_path, 'INFO')
    logging.getLogger('gcddpm.test').info('hello log')
    for handler in list(logging.getLogger().handlers):
        if getattr(handler, '_gcddpm', False):
            handler.flush()
            logging.getLogger().removeHandler(handler)
            handler.close()
    assert 'hello log' in log_file.read_text(encoding='utf-8')


def test_desk_run_file_resolves():
    run_config = manager(Path(__file__).resolve().parent.parent / 'runs' / 'desk.yaml').resolve()
    assert run_config.universe.num_categories == 40
    assert run_config.model.attention_resolutions == (16, 8)
    assert run_config.eval.sweep_gammas == (0.0, 2.0)
