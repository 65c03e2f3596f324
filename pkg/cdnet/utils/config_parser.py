import dataclasses
import json
import typing
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union

import yaml

from cdnet.errors import ConfigError

T = TypeVar('T')


def _type_error(where: str, expected: str, value: Any) -> ConfigError:
    return ConfigError(f"config invalid: {where} must be {expected}, got {value!r}")


def check_value(value: Any, hint: Any, where: str) -> Any:
    """
    Check a config value against a type annotation and return it in that type.
    Handles bool, int, float, str, Optional, List and Tuple; other types pass through.
    """
    origin, args = typing.get_origin(hint), typing.get_args(hint)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return check_value(value, inner[0], where) if len(inner) == 1 else value

    if hint is bool:
        if not isinstance(value, bool):
            raise _type_error(where, 'a boolean', value)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise _type_error(where, 'an integer', value)
        return value
    if hint is float:
        if isinstance(value, bool):
            raise _type_error(where, 'a number', value)
        if isinstance(value, (int, float)):
            return float(value)
        # YAML 1.1 reads exponent literals without a dot, e.g. 1e-4, as strings
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise _type_error(where, 'a number', value)
    if hint is str:
        if not isinstance(value, str):
            raise _type_error(where, 'a string', value)
        return value

    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise _type_error(where, 'a list', value)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise _type_error(where, f"a list of {len(args)} values", value)
            return tuple(check_value(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        elem = args[0] if args else Any
        return origin(check_value(v, elem, f"{where}[{i}]") for i, v in enumerate(value))

    return value


def build_dataclass(cls: Type[T], data: Optional[Dict[str, Any]], section: str = '') -> T:
    """
    Build a config dataclass from a plain dict, rejecting unknown keys and
    values of the wrong type. Missing keys fall back to the dataclass defaults.
    """
    data = data or {}
    label = section or cls.__name__
    if not isinstance(data, dict):
        raise ConfigError(f"config invalid: section '{label}' must be a mapping")

    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config invalid: unknown keys in '{label}': {', '.join(unknown)}")

    hints = typing.get_type_hints(cls)
    data = {k: check_value(v, hints.get(k, Any), f"{label}.{k}") for k, v in data.items()}

    try:
        obj = cls(**data)
    except TypeError as e:
        raise ConfigError(f"config invalid: {label}: {str(e)}") from e

    validate = getattr(obj, 'validate', None)
    if validate is not None:
        try:
            validate()
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(f"config invalid: {label}: {str(e)}") from e
    return obj


class ConfigParser:
    def __init__(self, config_path):
        self.config_path = Path(config_path) if config_path else None
        self._config_cache = None
        self._config_error = None

    def read_config(self) -> Tuple[Optional[Dict[str, Any]], Optional[str]]:
        """
        Read and parse a run configuration file (JSON or YAML)
        Returns: (config_dict, error_message)
        """
        if not self.config_path:
            return None, "No configuration path provided"

        try:
            if not self.config_path.exists():
                return None, f"Configuration file not found: {self.config_path}"

            with open(self.config_path, 'r') as f:
                # JSON documents are valid YAML
                config = yaml.safe_load(f)
            if config is None:
                config = {}
            if not isinstance(config, dict):
                return None, "Configuration root must be a mapping"
            self._config_cache = config
            self._config_error = None
            return self._config_cache, None
        except yaml.YAMLError as e:
            error_msg = f"Invalid configuration syntax: {str(e)}"
            self._config_error = error_msg
            return None, error_msg
        except Exception as e:
            error_msg = f"Error reading configuration: {str(e)}"
            self._config_error = error_msg
            return None, error_msg

    def write_config(self, config_data: Dict[str, Any]) -> Tuple[bool, Optional[str]]:
        """
        Write configuration as JSON, keeping a backup of any previous file
        Returns: (success, error_message)
        """
        if not self.config_path:
            return False, "No configuration path provided"

        backup_path = self.config_path.with_suffix(self.config_path.suffix + '.backup')
        if self.config_path.exists():
            try:
                self.config_path.rename(backup_path)
            except Exception as e:
                return False, f"Could not create backup: {str(e)}"

        try:
            self.config_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.config_path, 'w') as f:
                json.dump(config_data, f, indent=2, sort_keys=True)
                f.write('\n')
            if backup_path.exists():
                backup_path.unlink()
            return True, None
        except Exception as e:
            if backup_path.exists():
                try:
                    backup_path.rename(self.config_path)
                except Exception:
                    return False, f"Write failed and could not restore backup: {str(e)}"
            return False, f"Could not write configuration: {str(e)}"

    def load(self, allowed_sections) -> Dict[str, Any]:
        """Read the file and reject top-level keys outside allowed_sections"""
        config, error = self.read_config()
        if error:
            if self.config_path is not None and not self.config_path.exists():
                raise FileNotFoundError(error)
            raise ConfigError(f"config invalid: {error}")

        unknown = sorted(set(config) - set(allowed_sections))
        if unknown:
            raise ConfigError(f"config invalid: unknown keys: {', '.join(unknown)}")
        return config

