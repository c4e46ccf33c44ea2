"""
Central configuration management for the glyph-conditional diffusion toolkit.
Shared by every command in main.py.

Layers (later wins):
    1. built-in defaults (section dataclasses owned by each module)
    2. YAML run file (--config)
    3. environment / .env (GCDDPM_<SECTION>__<KEY>=value, plus GCDDPM_LOG_LEVEL)
    4. command-line overrides (--set section.key=value)

Usage:
    from central_config import CentralConfigManager

    manager = CentralConfigManager('runs/desk.yaml', overrides=['train.steps=200'])
    run_config = manager.resolve()
    steps = manager.get_setting('train.steps')

    save_resolved_config(run_config, 'runs/out')
"""

import dataclasses
import logging
import os
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np
import torch
import yaml
from dotenv import load_dotenv

from denoiser import ModelConfig, TrainConfig
from diffusion_core import ScheduleConfig
from evalx import ClassifierConfig, EvalConfig
from glyph_data import UniverseConfig
from guidance import SamplingConfig

logger = logging.getLogger(__name__)

TOOL_VERSION = 'gcddpm 0.3.1'
ENV_PREFIX = 'GCDDPM_'
# flat variables without a section
ENV_ALIASES = {'GCDDPM_LOG_LEVEL': 'runtime.log_level'}
RESOLVED_CONFIG_FILE = 'resolved_config.yaml'
VERSION_FILE = 'VERSION'


class ConfigError(ValueError):
    """Unknown key, bad type or unreadable config file."""


# ============================================================================
# SECTIONS OWNED BY THE CLI
# ============================================================================

@dataclass
class PathsConfig:
    """Input/output locations. Empty string means 'not given'."""
    dataset_dir: str = 'data/desk'
    checkpoint: str = ''
    output_dir: str = 'runs/latest'


@dataclass
class RuntimeConfig:
    device: str = 'cpu'
    deterministic: bool = True
    log_level: str = 'INFO'
    num_threads: int = 0


@dataclass
class RunConfig:
    """Fully resolved configuration of one command invocation."""
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {name: section_to_dict(getattr(self, name)) for name in SECTION_TYPES}


SECTION_TYPES = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


# ============================================================================
# SECTION (DE)SERIALIZATION
# ============================================================================

def section_to_dict(section) -> Dict[str, Any]:
    """Dataclass -> plain dict; tuples become lists so YAML stays readable."""
    out = {}
    for f in dataclasses.fields(section):
        value = getattr(section, f.name)
        if isinstance(value, (tuple, set, frozenset)):
            value = sorted(value) if isinstance(value, (set, frozenset)) else list(value)
        out[f.name] = value
    return out


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Cast a raw value to the type of the field default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ('true', 'false', '1', '0', 'yes', 'no'):
            return value.lower() in ('true', '1', 'yes')
        raise ConfigError(f"'{key}' expects a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"'{key}' expects an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"'{key}' expects an integer, got {value!r}") from None
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"'{key}' expects a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"'{key}' expects a number, got {value!r}") from None
    if isinstance(default, (tuple, list, frozenset, set)):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{key}' expects a list, got {value!r}")
        items = list(value)
        sample = next(iter(default), None)
        if sample is not None and not isinstance(sample, str):
            items = [_coerce(v, sample, key) for v in items]
        return type(default)(items)
    if isinstance(default, str):
        return str(value)
    return value


def section_from_dict(section_type, data: Dict[str, Any], section_name: str):
    """Build a section dataclass, rejecting unknown keys by dotted name."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section_name}' must be a mapping, got {type(data).__name__}")

    defaults = section_type()
    known = {f.name for f in dataclasses.fields(section_type)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"Unknown config key: '{section_name}.{key}'")
        kwargs[key] = _coerce(value, getattr(defaults, key), f"{section_name}.{key}")

    try:
        return dataclasses.replace(defaults, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid section '{section_name}': {e}") from e


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    unknown = set(data) - set(SECTION_TYPES)
    if unknown:
        raise ConfigError(f"Unknown config section: '{sorted(unknown)[0]}'")
    sections = {
        name: section_from_dict(factory, data.get(name), name)
        for name, factory in SECTION_TYPES.items()
    }
    return RunConfig(**sections)


# ============================================================================
# CONFIG MANAGER
# ============================================================================

class CentralConfigManager:
    """
    Layered run configuration with an in-memory cache.

    Features:
    - YAML run files, env/.env layer, --set overrides
    - Unknown keys are rejected with their dotted name
    - Resolved snapshot is what every command persists beside its outputs
    """

    def __init__(
        self,
        config_file: Optional[Union[str, Path]] = None,
        overrides: Optional[Iterable[str]] = None,
        use_env: bool = True,
    ):
        """
        Args:
            config_file: YAML run file (None -> defaults only)
            overrides: 'section.key=value' strings, applied last
            use_env: read GCDDPM_* variables (after loading .env)
        """
        self.config_file = Path(config_file) if config_file else None
        self.overrides = list(overrides or [])
        self.use_env = use_env
        self._resolved: Optional[RunConfig] = None
        self._raw: Dict[str, Dict[str, Any]] = {}

    def _load_file(self) -> Dict[str, Any]:
        if self.config_file is None:
            return {}
        if not self.config_file.exists():
            raise ConfigError(f"Config file not found: {self.config_file}")
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file unreadable ({self.config_file}): {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file must hold a mapping: {self.config_file}")
        logger.info(f"Config file loaded: {self.config_file}")
        return data

    def _env_pairs(self) -> List[str]:
        """GCDDPM_TRAIN__STEPS=10 -> 'train.steps=10'; GCDDPM_LOG_LEVEL -> runtime.log_level."""
        if not self.use_env:
            return []
        load_dotenv(override=False)
        pairs = []
        for name, value in sorted(os.environ.items()):
            if name in ENV_ALIASES:
                pairs.append(f"{ENV_ALIASES[name]}={value}")
                continue
            if not name.startswith(ENV_PREFIX) or '__' not in name:
                continue
            section, key = name[len(ENV_PREFIX):].lower().split('__', 1)
            pairs.append(f"{section}.{key}={value}")
        return pairs

    @staticmethod
    def _apply_override(raw: Dict[str, Dict[str, Any]], override: str) -> None:
        if '=' not in override:
            raise ConfigError(f"Override must look like section.key=value: '{override}'")
        dotted, value = override.split('=', 1)
        if '.' not in dotted:
            raise ConfigError(f"Override key must be section.key: '{dotted}'")
        section, key = dotted.strip().split('.', 1)
        try:
            parsed = yaml.safe_load(value) if value.strip() else ''
        except yaml.YAMLError:
            parsed = value
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"Section '{section}' must be a mapping")
        raw[section][key] = parsed

    def resolve(self) -> RunConfig:
        """Resolve all layers once; later calls return the cached config."""
        if self._resolved is not None:
            return self._resolved

        raw = {k: dict(v or {}) for k, v in self._load_file().items()}
        for pair in self._env_pairs() + self.overrides:
            self._apply_override(raw, pair)

        self._raw = raw
        self._resolved = run_config_from_dict(raw)
        logger.info(f"Config resolved ({len(self.overrides)} overrides)")
        return self._resolved

    def get_setting(self, dotted_key: str, default: Any = None) -> Any:
        """
        Args:
            dotted_key: 'train.steps' style key

        Returns:
            Resolved value or default
        """
        section, _, key = dotted_key.partition('.')
        run_config = self.resolve()
        if section not in SECTION_TYPES:
            return default
        return getattr(getattr(run_config, section), key, default)

    def refresh(self) -> None:
        """Drop the cached resolution (file/env re-read on next resolve)."""
        self._resolved = None
        self._raw = {}
        logger.info("Config cache cleared")


# ============================================================================
# HELPERS
# ============================================================================

def save_resolved_config(run_config: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Write resolved_config.yaml and VERSION into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_FILE
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(run_config.to_dict(), f, sort_keys=True, allow_unicode=True)
    (out_dir / VERSION_FILE).write_text(TOOL_VERSION + '\n', encoding='utf-8')
    return path


def load_resolved_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if path.is_dir():
        path = path / RESOLVED_CONFIG_FILE
    return CentralConfigManager(path, use_env=False).resolve()


def setup_logging(out_dir: Union[str, Path], level: str = 'INFO', log_name: str = 'gcddpm.log') -> Path:
    """File + console logging under <out_dir>/logs."""
    log_dir = Path(out_dir) / 'logs'
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / log_name

    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_gcddpm', False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    console = logging.StreamHandler(sys.stderr)
    for handler in (file_handler, console):
        handler.setFormatter(formatter)
        handler._gcddpm = True
        root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    return log_file


def seed_everything(seed: int, deterministic: bool = True, num_threads: int = 0) -> None:
    """
    Seed python/numpy/torch. Deterministic mode also pins torch to
    deterministic kernels and a single intra-op thread.
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif num_threads > 0:
        torch.set_num_threads(num_threads)
