import copy
import json
import os
from typing import Any, Dict, List, Mapping, Optional, Sequence

import yaml

from core.exceptions import ConfigError
from core.experiment_setup import ExperimentConfig
from utils.log_main import logger

# Define default paths relative to the loader file's location
CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_SETTINGS_PATH = os.path.join(CONFIG_DIR, 'settings.yaml')


def load_yaml_config(file_path: str) -> Dict[str, Any]:
    """Loads a YAML configuration file."""
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f)
            if config is None:
                logger.warning(f"Config file {file_path} is empty.", extra={"msg_type": "system"})
                return {}
            return config
    except FileNotFoundError:
        logger.error(f"Configuration file not found at {file_path}", extra={"msg_type": "system"})
        raise
    except yaml.YAMLError as e:
        logger.error(f"Error parsing YAML file {file_path}: {e}", extra={"msg_type": "system"})
        raise


def load_config_file(file_path: str) -> Dict[str, Any]:
    """Loads a run configuration from JSON, or YAML for .yaml/.yml files."""
    if file_path.endswith(('.yaml', '.yml')):
        return load_yaml_config(file_path)
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        logger.error(f"Configuration file not found at {file_path}", extra={"msg_type": "system"})
        raise
    except json.JSONDecodeError as e:
        logger.error(f"Error parsing JSON file {file_path}: {e}", extra={"msg_type": "system"})
        raise


def parse_overrides(tokens: Sequence[str]) -> Dict[str, Any]:
    """Turns ['--dim', '8', '--train.iterations', '100'] into a nested dict of typed values.

    Values are parsed as YAML scalars, so '1e-3', '[0, 1, 2]' and 'true' keep their types.
    """
    overrides: Dict[str, Any] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        key = tokens[i]
        if not key.startswith('--') or len(key) == 2:
            raise ConfigError(f"Expected an option of the form --key, got '{key}'")
        if i + 1 >= len(tokens):
            raise ConfigError(f"Option '{key}' is missing a value")
        try:
            value = yaml.safe_load(tokens[i + 1])
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse the value of '{key}': {e}") from e
        if isinstance(value, str):
            # YAML 1.1 reads exponent floats without a dot ('1e-3') as strings
            try:
                value = float(value)
            except ValueError:
                pass
        path = key[2:].replace('-', '_').split('.')
        node = overrides
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
        i += 2
    return overrides


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def available_presets(settings_path: str = DEFAULT_SETTINGS_PATH) -> List[str]:
    return list(load_yaml_config(settings_path).get('experiment_configurations', {}).keys())


def resolve_config_dict(settings_path: str = DEFAULT_SETTINGS_PATH,
                        preset: Optional[str] = None,
                        config_path: Optional[str] = None,
                        overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """defaults <- preset <- config file <- overrides, before validation."""
    settings = load_yaml_config(settings_path)
    resolved = copy.deepcopy(settings.get('experiment_defaults', {}))
    if preset is not None:
        presets = settings.get('experiment_configurations', {})
        if preset not in presets:
            raise ConfigError(f"Unknown preset '{preset}'. Available: {sorted(presets)}")
        resolved = _deep_merge(resolved, presets[preset])
        resolved.setdefault('run_name', preset)
    if config_path is not None:
        resolved = _deep_merge(resolved, load_config_file(config_path))
    if overrides:
        resolved = _deep_merge(resolved, overrides)
    return resolved


def load_experiment_config(settings_path: str = DEFAULT_SETTINGS_PATH,
                           preset: Optional[str] = None,
                           config_path: Optional[str] = None,
                           overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Resolves and validates the configuration of one experiment run.

    Args:
        settings_path: Path to the settings YAML file holding defaults and presets.
        preset: Name of an entry under experiment_configurations.
        config_path: Optional JSON or YAML file with further fields.
        overrides: Parsed --key value pairs, applied last.

    Returns:
        The validated ExperimentConfig.

    Raises:
        ConfigError: On unknown keys, unknown presets or invalid values.
    """
    logger.debug(f"Loading settings from: {settings_path}", extra={"msg_type": "system"})
    resolved = resolve_config_dict(settings_path, preset, config_path, overrides)
    try:
        config = ExperimentConfig.from_dict(resolved)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    logger.debug(f"Resolved configuration: {config.to_dict()}", extra={"msg_type": "system"})
    return config
